//! Plain-text run configuration: one `key = value` per line, `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{SplitRatios, TrafficSeries};
use crate::dstgg::GraphMode;
use crate::error::{Error, Result};
use crate::model::{ClusterRefresh, ModelConfig};
use crate::train_eval::{Schedule, TrainOptions};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MHGNET_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `nodes = 0` and the day length are taken from the dataset.
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub split: SplitRatios,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                nodes: 0,
                ..ModelConfig::default()
            },
            schedule: Schedule::default(),
            batch_size: 32,
            epochs: 100,
            split: SplitRatios::new(0.6, 0.2, 0.2),
        }
    }
}

fn graph_mode_name(m: GraphMode) -> &'static str {
    match m {
        GraphMode::Fused => "fused",
        GraphMode::NoSpatial => "no-sg",
        GraphMode::NoTemporal => "no-tg",
    }
}

fn refresh_name(r: ClusterRefresh) -> &'static str {
    match r {
        ClusterRefresh::Epoch => "epoch",
        ClusterRefresh::Batch => "batch",
    }
}

fn value<T: FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.parse().map_err(|_| format!("cannot parse `{raw}`"))
}

impl RunConfig {
    pub const KEYS: [&'static str; 29] = [
        "nodes",
        "p",
        "d",
        "d_s",
        "d_t",
        "history",
        "horizon",
        "top_k",
        "hops",
        "gamma",
        "alpha",
        "beta",
        "rnn_width_multiplier",
        "dropout",
        "seed",
        "graph_mode",
        "clustering",
        "cluster_refresh",
        "batch_size",
        "epochs",
        "lr",
        "warmup_epochs",
        "curriculum_length",
        "lr_warmup",
        "horizon_warmup",
        "train_ratio",
        "val_ratio",
        "test_ratio",
        "steps_per_day",
    ];

    fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        match key {
            "nodes" => m.nodes = value(raw)?,
            "p" => m.patterns = value(raw)?,
            "d" => m.width = value(raw)?,
            "d_s" => m.node_width = value(raw)?,
            "d_t" => m.time_width = value(raw)?,
            "history" => m.history = value(raw)?,
            "horizon" => m.horizon = value(raw)?,
            "top_k" => m.top_k = value(raw)?,
            "hops" => m.hops = value(raw)?,
            "gamma" => m.gamma = value(raw)?,
            "alpha" => m.alpha = value(raw)?,
            "beta" => m.beta = value(raw)?,
            "rnn_width_multiplier" => m.rnn_width_multiplier = value(raw)?,
            "dropout" => m.dropout = value(raw)?,
            "seed" => m.seed = value(raw)?,
            "steps_per_day" => m.steps_per_day = value(raw)?,
            "graph_mode" => {
                m.graph_mode = match raw {
                    "fused" => GraphMode::Fused,
                    "no-sg" => GraphMode::NoSpatial,
                    "no-tg" => GraphMode::NoTemporal,
                    _ => return Err(format!("graph_mode must be fused, no-sg or no-tg, got `{raw}`")),
                }
            }
            "clustering" => m.clustering = value(raw)?,
            "cluster_refresh" => {
                m.cluster_refresh = match raw {
                    "epoch" => ClusterRefresh::Epoch,
                    "batch" => ClusterRefresh::Batch,
                    _ => return Err(format!("cluster_refresh must be epoch or batch, got `{raw}`")),
                }
            }
            "batch_size" => self.batch_size = value(raw)?,
            "epochs" => self.epochs = value(raw)?,
            "lr" => self.schedule.base_lr = value(raw)?,
            "warmup_epochs" => self.schedule.warmup_epochs = value(raw)?,
            "curriculum_length" => self.schedule.curriculum_length = value(raw)?,
            "lr_warmup" => self.schedule.lr_warmup = value(raw)?,
            "horizon_warmup" => self.schedule.horizon_warmup = value(raw)?,
            "train_ratio" => self.split.train = value(raw)?,
            "val_ratio" => self.split.val = value(raw)?,
            "test_ratio" => self.split.test = value(raw)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text; `origin` labels error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::ConfigLine {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            cfg.set(key.trim(), raw.trim()).map_err(err)?;
        }
        cfg.schedule.max_horizon = cfg.model.horizon;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn render(&self) -> String {
        let m = &self.model;
        let s = &self.schedule;
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("nodes", &m.nodes);
        kv("steps_per_day", &m.steps_per_day);
        kv("p", &m.patterns);
        kv("d", &m.width);
        kv("d_s", &m.node_width);
        kv("d_t", &m.time_width);
        kv("history", &m.history);
        kv("horizon", &m.horizon);
        kv("top_k", &m.top_k);
        kv("hops", &m.hops);
        kv("gamma", &m.gamma);
        kv("alpha", &m.alpha);
        kv("beta", &m.beta);
        kv("rnn_width_multiplier", &m.rnn_width_multiplier);
        kv("dropout", &m.dropout);
        kv("seed", &m.seed);
        kv("graph_mode", &graph_mode_name(m.graph_mode));
        kv("clustering", &m.clustering);
        kv("cluster_refresh", &refresh_name(m.cluster_refresh));
        kv("batch_size", &self.batch_size);
        kv("epochs", &self.epochs);
        kv("lr", &s.base_lr);
        kv("warmup_epochs", &s.warmup_epochs);
        kv("curriculum_length", &s.curriculum_length);
        kv("lr_warmup", &s.lr_warmup);
        kv("horizon_warmup", &s.horizon_warmup);
        kv("train_ratio", &self.split.train);
        kv("val_ratio", &self.split.val);
        kv("test_ratio", &self.split.test);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    /// Applies the `MHGNET_SEED` override when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.model.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{raw}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Model config bound to a dataset's node count and day length.
    pub fn model_for(&self, series: &TrafficSeries) -> Result<ModelConfig> {
        if self.model.nodes != 0 && self.model.nodes != series.nodes() {
            return Err(Error::Config(format!(
                "config expects {} nodes, dataset has {}",
                self.model.nodes,
                series.nodes()
            )));
        }
        let cfg = ModelConfig {
            nodes: series.nodes(),
            steps_per_day: series.steps_per_day,
            ..self.model.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_options(&self, verbose: bool) -> TrainOptions {
        TrainOptions {
            schedule: Schedule {
                max_horizon: self.model.horizon,
                ..self.schedule.clone()
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.model.seed,
            verbose,
        }
    }
}
