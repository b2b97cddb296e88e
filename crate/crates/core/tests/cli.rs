//! End-to-end command-line behavior through `cli::run`.

use std::fs;
use std::path::{Path, PathBuf};

use mhgnet::cli::{run, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE};

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn invoke(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("mhgnet").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    Outcome {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mhgnet-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_reports_step_count() {
    let dir = scratch("synth");
    let data = dir.join("d.bin");
    let planted = dir.join("planted.csv");
    let r = invoke(&["synth", "--nodes", "24", "--days", "7", "--patterns", "2", "--seed", "1", "--out", s(&data), "--planted-out", s(&planted)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("steps=2016 nodes=24"), "{}", r.out);
    let text = fs::read_to_string(&planted).unwrap();
    assert_eq!(text.lines().count(), 25);
    assert!(text.starts_with("node,type\n0,0\n1,1\n"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let r = invoke(&["synth", "--bogus"]);
    assert_eq!(r.code, 2);
    assert!(r.out.is_empty());
    assert!(!r.err.is_empty());
}

#[test]
fn help_goes_to_stdout() {
    let r = invoke(&["--help"]);
    assert_eq!(r.code, 0);
    assert!(r.out.contains("train"));
}

#[test]
fn unknown_variant_is_usage_error() {
    let r = invoke(&["ablate", "--variant", "no-such", "--data", "missing.bin"]);
    assert_eq!(r.code, 2);
    assert!(r.err.contains("no-such"), "{}", r.err);
}

#[test]
fn bad_config_line_is_reported() {
    let dir = scratch("badcfg");
    let data = dir.join("d.bin");
    assert_eq!(invoke(&["synth", "--nodes", "6", "--days", "2", "--patterns", "2", "--out", s(&data)]).code, 0);
    let cfg = dir.join("bad.txt");
    fs::write(&cfg, "p = 2\nwidth_of_things = 3\n").unwrap();
    let r = invoke(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.join("run"))]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("line 2"), "{}", r.err);
}

#[test]
fn missing_data_is_runtime_error() {
    let dir = scratch("missing");
    let r = invoke(&["train", "--data", s(&dir.join("absent.bin")), "--out", s(&dir.join("run"))]);
    assert_eq!(r.code, 1);
    assert!(r.err.starts_with("error:"));
}

#[test]
fn convert_then_train_eval_inspect_dump() {
    let dir = scratch("pipeline");
    let csv = dir.join("raw.csv");
    let mut text = String::from("a,b,c,d,e,f\n");
    for t in 0..240 {
        let row: Vec<String> = (0..6).map(|n| format!("{:.3}", 50.0 + 10.0 * n as f64 + ((t + 3 * n) % 24) as f64)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(&csv, text).unwrap();
    let data = dir.join("d.bin");
    let r = invoke(&["convert", "--csv", s(&csv), "--out", s(&data), "--steps-per-day", "24"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("steps=240 nodes=6"), "{}", r.out);

    let cfg = dir.join("small.txt");
    fs::write(&cfg, "d = 4\nd_s = 3\nd_t = 3\nhistory = 4\nhorizon = 3\ntop_k = 3\nbatch_size = 16\n").unwrap();
    let run_dir = dir.join("run");
    let r = invoke(&["train", "--config", s(&cfg), "--data", s(&data), "--epochs", "1", "--out", s(&run_dir), "--seed", "3"]);
    assert_eq!(r.code, 0, "{}", r.err);
    for f in [CHECKPOINT_FILE, LOG_FILE, CONFIG_FILE] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run_dir.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let r = invoke(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("average"), "{}", r.out);

    let r = invoke(&["cluster-inspect", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.starts_with("node,r_0,r_1,type\n"), "{}", r.out);
    assert!(r.out.contains("pattern,limit_point,pool_size"));

    let r = invoke(&["graph-dump", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let mut lines = r.out.lines();
    assert_eq!(lines.next(), Some("cluster,source,target,weight"));
    for line in lines {
        let w: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&w) && w > 0.0);
    }

    let r = invoke(&["graph-dump", "--checkpoint", s(&ckpt), "--data", s(&data), "--sample", "100000"]);
    assert_eq!(r.code, 1);
}
