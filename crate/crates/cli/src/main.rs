//! `ldmole` command-line front end.
//!
//! Exit codes: 0 success, 1 a check failed or a run broke, 2 bad usage or
//! configuration.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use ldmole::analysis::{analyze, check_tables, empty_support_probe, heatmap_rows, write_csv, write_tables};
use ldmole::checkpoint::{load_checkpoint, save_checkpoint};
use ldmole::config::{RouterSection, TrainConfig};
use ldmole::data::{make_dataset, Example, Split, SyntheticDataset};
use ldmole::oracle::{run_suite, Subject, SuiteConfig};
use ldmole::routers::{relu_route, topk_route, RouterKind};
use ldmole::simplex::{project_with_threshold, GateScores, SparsityFactor};
use ldmole::train::{evaluate, train, TrainOutcome};
use ldmole::Error;

#[derive(Parser)]
#[command(name = "ldmole", version, about = "Sparsegen routing for mixtures of LoRA experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Project one score vector and print the routing weights.
    Route {
        /// Comma-separated gate scores.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        u: Vec<f64>,
        /// Sparsity factor (< 1); the default 0 is sparsemax.
        #[arg(long, allow_negative_numbers = true, conflicts_with_all = ["topk", "relu"])]
        lambda: Option<f64>,
        /// Route with a softmax over the k largest scores instead.
        #[arg(long, conflicts_with = "relu")]
        topk: Option<usize>,
        /// Route with ReLU weights instead.
        #[arg(long)]
        relu: bool,
        /// Print JSON with full precision.
        #[arg(long)]
        json: bool,
    },
    /// Compare the closed-form projection and derivatives against brute-force oracles.
    OracleCheck {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 1_000)]
        interval_trials: usize,
        #[arg(long, default_value_t = 1_000)]
        grad_trials: usize,
        #[arg(long, default_value_t = 8)]
        max_experts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run only the finite-difference derivative checks.
    GradCheck {
        #[arg(long, default_value_t = 1_000)]
        trials: usize,
        #[arg(long, default_value_t = 8)]
        max_experts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the synthetic task; writes a checkpoint and a metrics stream.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split; prints JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Write the routing-behaviour CSV tables for a checkpoint.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Analyse the N tokens whose routing support is most often empty,
        /// each repeated over a full sequence, instead of a dataset split.
        #[arg(long)]
        probe_empty: Option<usize>,
    },
    /// Train the λ-router, TopK(2) and ReLU on the same seed and summarize.
    CompareRouters {
        #[arg(long)]
        config: PathBuf,
        /// Summary JSON path.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Marks errors that should exit with the usage/config code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Exit code for an error chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig(_)
                | Error::InvalidArgument(_)
                | Error::InvalidInput(_)
                | Error::Unsupported(_)
                | Error::DigestMismatch { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

/// Check outcomes: `Ok(true)` passed, `Ok(false)` failed.
type Outcome = anyhow::Result<bool>;

fn load_config(path: &Path) -> anyhow::Result<TrainConfig> {
    if !path.exists() {
        return Err(Usage(format!("config file {} does not exist", path.display())).into());
    }
    TrainConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_route(u: Vec<f64>, lambda: Option<f64>, topk: Option<usize>, relu: bool, as_json: bool) -> Outcome {
    let scores = GateScores::new(u)?;
    let (p, k, tau, lam) = if let Some(k) = topk {
        let w = topk_route(&scores, k)?;
        let n = w.k();
        (w.probs, n, None, None)
    } else if relu {
        let w = relu_route(&scores);
        let n = w.k();
        (w.probs, n, None, None)
    } else {
        let lam = SparsityFactor::new(lambda.unwrap_or(0.0))?;
        let (w, st) = project_with_threshold(&scores, lam);
        let n = w.k();
        (w.probs, n, Some(st.tau), Some(lam.get()))
    };
    if as_json {
        println!("{}", json!({ "p": p, "k": k, "tau": tau, "lambda": lam }));
    } else {
        println!("p = {}", fmt_vec(&p));
        println!("k = {k}");
        if let Some(t) = tau {
            println!("tau = {t:.4}");
        }
    }
    Ok(true)
}

fn suite_config(seed: u64, max_experts: usize) -> SuiteConfig {
    SuiteConfig {
        seed,
        max_experts,
        ..SuiteConfig::default()
    }
}

fn report(cfg: &SuiteConfig) -> Outcome {
    let r = run_suite(cfg, &Subject::closed_form())?;
    println!("{}", serde_json::to_string_pretty(&r)?);
    Ok(r.passed())
}

fn write_jsonl_events(path: &Path, cfg: &TrainConfig) -> anyhow::Result<TrainOutcome> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let out = train(cfg, |e| {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
        Ok(())
    })?;
    w.flush()?;
    Ok(out)
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> Outcome {
    let cfg = load_config(config)?;
    let dir = out
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Usage("no output directory: pass --out or set output.dir".into()))?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let outcome = write_jsonl_events(&dir.join("metrics.jsonl"), &cfg)?;
    save_checkpoint(&outcome.model, &dir.join("checkpoint.ldml"))?;
    write_csv(&dir.join("epoch_heatmap.csv"), &heatmap_rows(&outcome.epoch_mass, 0))?;
    let summary = json!({
        "router": cfg.router.kind().name(),
        "seed": cfg.seed,
        "initial_train_lm_loss": outcome.initial_train_lm,
        "final_train": outcome.final_train,
        "final_val": outcome.final_val,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

fn dataset_for(cfg: &TrainConfig, split: Split) -> ldmole::Result<SyntheticDataset> {
    make_dataset(&cfg.data, cfg.model.vocab, cfg.model.num_classes, cfg.seed, split)
}

fn cmd_eval(config: &Path, checkpoint: &Path, split: Split) -> Outcome {
    let cfg = load_config(config)?;
    let model = load_checkpoint(&cfg.model_config(), checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = dataset_for(&cfg, split)?;
    if data.is_empty() {
        return Err(Usage(format!("the {} split is empty", split.name())).into());
    }
    let r = evaluate(&model, &data, &cfg.loss_weights(), cfg.train.batch_size)?;
    println!("{}", serde_json::to_string_pretty(&json!({ "split": split.name(), "metrics": r }))?);
    Ok(true)
}

fn cmd_analyze(config: &Path, checkpoint: &Path, out: &Path, split: Split, probe: Option<usize>) -> Outcome {
    let cfg = load_config(config)?;
    let model = load_checkpoint(&cfg.model_config(), checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = match probe {
        Some(0) => return Err(Usage("--probe-empty needs at least one token".into()).into()),
        Some(n) => {
            let mut d = dataset_for(&cfg, Split::Val)?;
            d.examples = empty_support_probe(&model, cfg.data.seq_len, n)?
                .into_iter()
                .map(|tokens| Example {
                    targets: d.labels.labels(&tokens),
                    mask: vec![1; tokens.len()],
                    tokens,
                })
                .collect();
            d
        }
        None => dataset_for(&cfg, split)?,
    };
    if data.is_empty() {
        return Err(Usage(format!("the {} split is empty", split.name())).into());
    }
    let tables = analyze(&model, &data, cfg.train.epochs - 1)?;
    check_tables(&tables)?;
    let files = write_tables(&tables, out)?;
    if tables.lambda_quantiles.is_none() {
        eprintln!(
            "notice: {} router has no sparsity factor; lambda_quantiles.csv omitted",
            cfg.router.kind().name()
        );
    }
    let summary = json!({
        "router": cfg.router.kind().name(),
        "files": files,
        "freq_rank_correlation": tables.freq_rank_correlation,
        "active_decreases_with_depth": tables.active_decreases_with_depth,
    });
    fs::write(out.join("analysis_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

fn cmd_compare(config: &Path, out: &Path) -> Outcome {
    let base = load_config(config)?;
    let ld = match base.router.kind() {
        k @ (RouterKind::LdShared | RouterKind::LdLocal) => k,
        _ => RouterKind::LdShared,
    };
    let mut methods = Vec::new();
    for kind in [ld, RouterKind::TopK(2), RouterKind::Relu] {
        let mut cfg = base.clone();
        cfg.router = RouterSection::from_kind(kind);
        let r = train(&cfg, |_| Ok(()))?;
        let last = r.final_val.as_ref().unwrap_or(&r.final_train);
        methods.push(json!({
            "router": kind.name(),
            "initial_train_lm_loss": r.initial_train_lm,
            "final_train_lm_loss": r.final_train.lm_loss,
            "final_val_accuracy": r.final_val.as_ref().map(|v| v.accuracy),
            "lm_loss": last.lm_loss,
            "lb_loss": last.lb_loss,
            "sparse_loss": last.sparse_loss,
            "total_loss": last.total_loss,
            "mean_active_experts": last.mean_active_experts,
            "zero_activation_rate": last.zero_activation_rate,
        }));
    }
    let summary = json!({ "seed": base.seed, "methods": methods });
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, serde_json::to_string_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(true)
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Route { u, lambda, topk, relu, json } => cmd_route(u, lambda, topk, relu, json),
        Command::OracleCheck {
            trials,
            interval_trials,
            grad_trials,
            max_experts,
            seed,
        } => {
            let cfg = SuiteConfig {
                trials,
                interval_trials,
                grad_trials,
                ..suite_config(seed, max_experts)
            };
            if trials == 0 {
                return Err(Usage("--trials must be at least 1".into()).into());
            }
            report(&cfg)
        }
        Command::GradCheck { trials, max_experts, seed } => {
            if trials == 0 {
                return Err(Usage("--trials must be at least 1".into()).into());
            }
            let cfg = SuiteConfig {
                grad_trials: trials,
                run_projection_checks: false,
                ..suite_config(seed, max_experts)
            };
            report(&cfg)
        }
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Eval { config, checkpoint, split } => cmd_eval(&config, &checkpoint, split.into()),
        Command::Analyze {
            config,
            checkpoint,
            out,
            split,
            probe_empty,
        } => cmd_analyze(&config, &checkpoint, &out, split.into(), probe_empty),
        Command::CompareRouters { config, out } => cmd_compare(&config, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
