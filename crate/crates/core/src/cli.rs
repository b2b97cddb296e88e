//! Command-line interface. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::clusterer;
use crate::config::RunConfig;
use crate::data::{load_series, save_series, series_from_csv, synthesize, TrafficSeries};
use crate::error::{Error, Result};
use crate::model::ForecastModel;
use crate::train_eval::{evaluate, prepare, run_ablation, train, Splits, Variant};

pub const CHECKPOINT_FILE: &str = "model.mhgc";
pub const LOG_FILE: &str = "log.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "mhgnet", version, about = "Traffic forecasting with decoupled patterns and clustered dynamic graphs")]
struct Cli {
    /// Overrides the configured seed (also settable through MHGNET_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.mhgc, log.csv and config.txt into --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Print one line per epoch to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Test-split metrics of a checkpoint at horizons 3, 6, 12 and on average.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Train an ablation variant and report its test metrics.
    Ablate {
        /// One of full, no-clusterer, no-sg, no-tg, p2, p3.
        #[arg(long)]
        variant: String,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        verbose: bool,
    },
    /// Write a synthetic dataset with planted node types.
    Synth {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        days: usize,
        #[arg(long)]
        patterns: usize,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of planted node types.
        #[arg(long)]
        planted_out: Option<PathBuf>,
    },
    /// Convert a CSV (one row per step, one column per node) to the binary series format.
    Convert {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 288)]
        steps_per_day: usize,
        /// 0 = Monday.
        #[arg(long, default_value_t = 0)]
        start_weekday: usize,
    },
    /// Print the pattern-ratio feature space, limit points, pools and node types as CSV.
    ClusterInspect {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Print the fused subgraphs of one test sample as `cluster,source,target,weight` CSV.
    GraphDump {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset in the binary series format.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to config.txt next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match dispatch(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    Ok(cfg)
}

fn splits(cfg: &RunConfig, series: TrafficSeries) -> Result<Splits> {
    prepare(Arc::new(series), cfg.model.history, cfg.model.horizon, cfg.split)
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Model restored from a checkpoint, plus the data it is evaluated on.
fn restore(ckpt: &CheckpointArgs, seed: Option<u64>) -> Result<(ForecastModel, Splits)> {
    let cfg_path = match &ckpt.config {
        Some(p) => p.clone(),
        None => ckpt
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(CONFIG_FILE),
    };
    let cfg = load_config(Some(&cfg_path), seed)?;
    let series = load_series(&ckpt.data)?;
    let mut model = ForecastModel::new(cfg.model_for(&series)?)?;
    model.load_checkpoint(&ckpt.checkpoint)?;
    Ok((model, splits(&cfg, series)?))
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train { run, out: dir, verbose } => {
            let mut cfg = load_config(run.config.as_deref(), seed)?;
            if let Some(e) = run.epochs {
                cfg.epochs = e;
            }
            let series = load_series(&run.data)?;
            let mut model = ForecastModel::new(cfg.model_for(&series)?)?;
            let data = splits(&cfg, series)?;
            let log = train(&mut model, &data, &cfg.train_options(verbose))?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            model.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
            log.write_csv(&dir.join(LOG_FILE))?;
            cfg.save(&dir.join(CONFIG_FILE))?;
            let best = log
                .best()
                .map_or("no epochs run".to_string(), |b| format!("best epoch {} val MAE {:.4}", b.epoch, b.val_mae));
            write_out(
                out,
                &format!("{} parameters; {best}; wrote {}\n", model.num_parameters(), dir.display()),
            )
        }
        Command::Eval { ckpt } => {
            let (model, data) = restore(&ckpt, seed)?;
            let report = evaluate(&model, &data.test, &data.scaler, 64)?;
            write_out(out, &format!("{report}\n"))
        }
        Command::Ablate { variant, run, verbose } => {
            let variant: Variant = variant.parse()?;
            let mut cfg = load_config(run.config.as_deref(), seed)?;
            if let Some(e) = run.epochs {
                cfg.epochs = e;
            }
            let series = load_series(&run.data)?;
            let model_cfg = cfg.model_for(&series)?;
            let data = splits(&cfg, series)?;
            let report = run_ablation(variant, &model_cfg, &data, &cfg.train_options(verbose))?;
            write_out(out, &format!("variant {variant}\n{report}\n"))
        }
        Command::Synth {
            nodes,
            days,
            patterns,
            out: path,
            planted_out,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => load_config(None, None)?.model.seed,
            };
            let syn = synthesize(nodes, days, patterns, seed)?;
            save_series(&syn.series, &path)?;
            if let Some(p) = planted_out {
                let mut text = String::from("node,type\n");
                for (i, t) in syn.planted.iter().enumerate() {
                    text.push_str(&format!("{i},{t}\n"));
                }
                fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            }
            write_out(
                out,
                &format!(
                    "wrote {}: steps={} nodes={}\n",
                    path.display(),
                    syn.series.steps(),
                    syn.series.nodes()
                ),
            )
        }
        Command::Convert {
            csv,
            out: path,
            steps_per_day,
            start_weekday,
        } => {
            let series = series_from_csv(&csv, steps_per_day, start_weekday)?;
            save_series(&series, &path)?;
            write_out(
                out,
                &format!(
                    "wrote {}: steps={} nodes={}\n",
                    path.display(),
                    series.steps(),
                    series.nodes()
                ),
            )
        }
        Command::ClusterInspect { ckpt } => {
            let (model, data) = restore(&ckpt, seed)?;
            let probe: Vec<usize> = (0..data.train.len().min(crate::model::PROBE_WINDOWS)).collect();
            let batch = data.train.batch(&probe, &data.scaler);
            let fs = model.feature_space(&batch.x, &batch.time)?;
            let asg = clusterer::assign(&fs);
            let p = fs.c.numel();
            let cols: Vec<String> = (0..p).map(|j| format!("r_{j}")).collect();
            let mut text = format!("node,{},type\n", cols.join(","));
            for (i, row) in fs.r.data().chunks(p).enumerate() {
                let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                text.push_str(&format!("{i},{},{}\n", vals.join(","), asg.types[i]));
            }
            text.push_str("\npattern,limit_point,pool_size\n");
            for j in 0..p {
                text.push_str(&format!("{j},{},{}\n", fs.c.data()[j], asg.pools[j].len()));
            }
            if asg.types != model.assignment().types {
                let _ = writeln!(err, "note: stored assignment differs from the recomputed one");
            }
            write_out(out, &text)
        }
        Command::GraphDump { ckpt, sample } => {
            let (model, data) = restore(&ckpt, seed)?;
            if sample >= data.test.len() {
                return Err(Error::Config(format!(
                    "sample {sample} outside test split of {} windows",
                    data.test.len()
                )));
            }
            let time = data.test.batch(&[sample], &data.scaler).time;
            let mut text = String::from("cluster,source,target,weight\n");
            for (c, sg) in model.subgraphs(&time)?.iter().enumerate() {
                for (i, j, w) in sg.triples() {
                    text.push_str(&format!("{c},{i},{j},{w}\n"));
                }
            }
            write_out(out, &text)
        }
    }
}
