use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"seed = 3

[model]
layers = 2
dim = 16
vocab = 32
num_experts = 4
lambda_hidden = 8

[router]
kind = "ld-shared"

[train]
epochs = 12
batch_size = 8
lr = 1e-2
lr_milestones = [9]

[data]
train_sequences = 48
val_sequences = 16
seq_len = 8
prompt_len = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ldmole"));
    c.env_remove("LDMOLE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn with_router(kind: &str) -> String {
    TINY.replace("kind = \"ld-shared\"", &format!("kind = \"{kind}\""))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn route_prints_weights_support_and_threshold() {
    let o = run(&["route", "--u", "2,1,0", "--lambda", "-2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("p = [0.6667, 0.3333, 0.0000]"), "{s}");
    assert!(s.contains("k = 2"), "{s}");
    assert!(s.contains("tau = 0.0000"), "{s}");

    let o = run(&["route", "--u", "1,0,-1", "--topk", "2"]);
    assert!(stdout(&o).contains("p = [0.7311, 0.2689, 0.0000]"), "{}", stdout(&o));

    let o = run(&["route", "--u", "1"]);
    assert!(stdout(&o).contains("p = [1.0000]"), "{}", stdout(&o));

    let o = run(&["route", "--u", "-1,-2", "--relu", "--json"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["k"], 0);
}

#[test]
fn malformed_arguments_exit_with_usage_code() {
    assert_eq!(run(&["route", "--u", "1,abc"]).status.code(), Some(2));
    assert_eq!(run(&["route", "--u", "1,2", "--lambda", "1.0"]).status.code(), Some(2));
    assert_eq!(run(&["oracle-check", "--trials", "0"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn oracle_check_passes_and_is_reproducible() {
    let args = [
        "oracle-check",
        "--trials",
        "300",
        "--interval-trials",
        "50",
        "--grad-trials",
        "50",
        "--seed",
        "7",
    ];
    let a = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&args);
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(v["failure_count"], 0);
    assert_eq!(v["trials"], 300);

    let g = run(&["grad-check", "--trials", "50"]);
    assert!(g.status.success(), "{}", stderr(&g));
}

#[test]
fn config_errors_are_reported_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = write_config(dir.path(), "missing.toml", "seed = 1\n[router]\ntop_k = 2\n");
    let o = run(&["train", "--config", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind"), "{}", stderr(&o));

    let unknown = write_config(dir.path(), "unknown.toml", &format!("{TINY}\n[extra]\nx = 1\n"));
    let o = run(&["train", "--config", p(&unknown), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("extra"), "{}", stderr(&o));

    let bad = write_config(dir.path(), "bad.toml", &TINY.replace("epochs = 12", "epochs = 0"));
    let o = run(&["train", "--config", p(&bad), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epochs"), "{}", stderr(&o));
}

#[test]
fn train_eval_and_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ld.toml", TINY);
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--config", p(&cfg), "--out", p(&run_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.toml", "metrics.jsonl", "checkpoint.ldml", "epoch_heatmap.csv", "summary.json"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let ckpt = run_dir.join("checkpoint.ldml");
    assert!(fs::read(&ckpt).unwrap().starts_with(b"LDML"));
    let events: Vec<Value> = fs::read_to_string(run_dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(events.iter().any(|e| e["split"] == "val"));

    let eval = |split: &str| run(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--split", split]);
    let a = eval("train");
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, eval("train").stdout);
    let summary: Value = serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    let metrics: Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(metrics["metrics"], summary["final_train"]);

    let out = dir.path().join("analysis");
    let o = run(&["analyze", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "per_layer_activation.csv",
        "lambda_quantiles.csv",
        "freq_activation.csv",
        "epoch_heatmap.csv",
        "zero_activation.csv",
        "analysis_summary.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    // A checkpoint is bound to the model configuration that produced it.
    let other = write_config(dir.path(), "relu.toml", &with_router("relu"));
    let o = run(&["eval", "--config", p(&other), "--checkpoint", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).to_lowercase().contains("digest"), "{}", stderr(&o));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &TINY.replace("epochs = 12", "epochs = 1"));
    let train = |seed: Option<&str>, out: &str| {
        let mut c = bin();
        c.args(["train", "--config", p(&cfg), "--out", p(&dir.path().join(out))]);
        if let Some(s) = seed {
            c.env("LDMOLE_SEED", s);
        }
        let o = c.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(dir.path().join(out).join("checkpoint.ldml")).unwrap()
    };
    let base = train(None, "a");
    assert_eq!(base, train(Some("3"), "b"));
    assert_ne!(base, train(Some("4"), "c"));
    let saved = fs::read_to_string(dir.path().join("c").join("config.toml")).unwrap();
    assert!(saved.contains("seed = 4"), "{saved}");

    let mut c = bin();
    c.args(["train", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    c.env("LDMOLE_SEED", "not-a-number");
    assert_eq!(c.output().unwrap().status.code(), Some(2));
}

#[test]
fn analyze_handles_routers_without_lambda() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["topk", "relu"] {
        let cfg = write_config(
            dir.path(),
            &format!("{kind}.toml"),
            &with_router(kind).replace("epochs = 12", "epochs = 1"),
        );
        let run_dir = dir.path().join(kind);
        let o = run(&["train", "--config", p(&cfg), "--out", p(&run_dir)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ckpt = run_dir.join("checkpoint.ldml");
        let out = run_dir.join("analysis");
        let mut args = vec!["analyze", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&out)];
        if kind == "relu" {
            args.extend(["--probe-empty", "8"]);
        }
        let o = run(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stderr(&o).contains("lambda_quantiles.csv omitted"), "{}", stderr(&o));
        assert!(!out.join("lambda_quantiles.csv").exists());
        let zero = fs::read_to_string(out.join("zero_activation.csv")).unwrap();
        let rates: Vec<f64> = zero
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        if kind == "relu" {
            assert!(rates.iter().any(|&r| r > 0.0), "{zero}");
        } else {
            assert!(rates.iter().all(|&r| r == 0.0), "{zero}");
        }
    }
}

#[test]
fn compare_routers_reports_three_methods_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let compare = |name: &str| {
        let out = dir.path().join(name);
        let o = run(&["compare-routers", "--config", p(&cfg), "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out).unwrap()
    };
    let a = compare("a.json");
    assert_eq!(a, compare("b.json"));
    let v: Value = serde_json::from_slice(&a).unwrap();
    let methods = v["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 3);
    let names: Vec<&str> = methods.iter().map(|m| m["router"].as_str().unwrap()).collect();
    assert!(names.iter().any(|n| n.starts_with("topk")) && names.contains(&"relu"), "{names:?}");
    for m in methods {
        let init = m["initial_train_lm_loss"].as_f64().unwrap();
        let fin = m["final_train_lm_loss"].as_f64().unwrap();
        assert!(fin <= 0.5 * init, "{}: {init} -> {fin}", m["router"]);
    }
}
