//! `retrack`: generate synthetic benchmarks, train, evaluate, ablate and
//! self-check the composed-retrieval pipeline.
//!
//! Every command prints its JSON result on stdout and a short summary on
//! stderr. Exit codes: 0 ok, 2 usage, 3 missing or unreadable input,
//! 4 failed check, 5 divergence.

mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use retrack::data::{generate, generate_dataset, load_dataset, Dataset, SplitKind};
use retrack::dst::self_test;
use retrack::eval::{build_index, compose_split, evaluate_split, export_similarity_matrix, split_gallery, DEFAULT_KS};
use retrack::train::{ablate, gradcheck_pipeline, run_training, sweep, Checkpoint, RunConfig, Trainer, VARIANTS};
use retrack::Error;

use config::{GenArgs, RunArgs, WeightArgs};

#[derive(Parser)]
#[command(name = "retrack", version, about = "Composed video retrieval with directional anchors and evidence-driven alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic triplet benchmark into a directory
    Gen(GenCmd),
    /// Train a model and write metrics and checkpoints
    Train(TrainCmd),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalCmd),
    /// Train the full model and ablated variants and compare test recall
    Ablate(AblateCmd),
    /// Compare analytic gradients of every loss against finite differences
    Gradcheck(GradcheckCmd),
    /// Run the Dempster combination self-tests
    DstOracle(DstCmd),
    /// Train over a grid of kappa and lambda values
    Sweep(SweepCmd),
}

#[derive(Args)]
struct GenCmd {
    /// Output directory for manifest.json, data.bin and extras.bin
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    gen: GenArgs,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    weights: WeightArgs,
    /// Dataset directory; a dataset is generated from the run seed when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for metrics.csv, recall.json, run.json and checkpoints
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint directory; --steps sets the new total step count
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitKind::Train,
            SplitArg::Val => SplitKind::Val,
            SplitArg::Test => SplitKind::Test,
        }
    }
}

#[derive(Args)]
struct EvalCmd {
    /// Checkpoint directory (containing ckpt.json and params.bin)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Write the JSON result here
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the query-by-gallery score matrix as CSV (with a JSON sidecar)
    #[arg(long)]
    export_similarity: Option<PathBuf>,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    weights: WeightArgs,
    /// Dataset directory; a dataset is generated from the run seed when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated variants; defaults to every ablation flag and activation swap
    #[arg(long = "variants", value_delimiter = ',')]
    variant_list: Option<Vec<String>>,
    /// Comma-separated training seeds; defaults to the run seed
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Exit with status 4 unless the full model's mean R@1 is at least every variant's
    #[arg(long)]
    check_ordering: bool,
    /// Write the JSON result here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckCmd {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    weights: WeightArgs,
    /// Number of consecutive seeds to check, starting at the run seed
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Batch size of the random probe batch
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Write the JSON result here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DstCmd {
    /// Random seed for the generated mass functions
    #[arg(long, env = "RETRACK_SEED", default_value_t = 0)]
    seed: u64,
    /// Number of random trials
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Write the JSON result here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    run: RunArgs,
    /// Dataset directory; a dataset is generated from the run seed when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated kappa values; the configured kappa when omitted
    #[arg(long = "kappa", value_delimiter = ',')]
    kappas: Vec<f64>,
    /// Comma-separated lambda values; the configured lambda when omitted
    #[arg(long = "lambda", value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Write the JSON result here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Missing(String),
    Divergence(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Missing(_) => 3,
            Failure::Divergence(_) => 5,
            Failure::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Missing(m) | Failure::Divergence(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => Failure::Usage(msg),
            Error::Io { .. } | Error::Json { .. } | Error::Corrupt { .. } | Error::VersionMismatch { .. } => {
                Failure::Missing(msg)
            }
            Error::Divergence { .. } | Error::NonFinite { .. } => Failure::Divergence(msg),
            _ => Failure::Other(msg),
        }
    }
}

type CmdResult = std::result::Result<Outcome, Failure>;

/// A finished command. `passed == false` exits with status 4.
struct Outcome {
    result: Value,
    summary: Vec<String>,
    passed: bool,
    out: Option<PathBuf>,
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_result(path: &Path, command: &str, result: &Value) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Other(format!("{}: {e}", parent.display())))?;
    }
    let doc = json!({ "command": command, "result": result, "timestamp": timestamp() });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::Other(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, Failure> {
    serde_json::to_value(v).map_err(|e| Failure::Other(e.to_string()))
}

fn open_dataset(data: Option<&Path>, cfg: &RunConfig) -> Result<Dataset, Failure> {
    match data.or(cfg.dataset.as_deref()) {
        Some(dir) => {
            if !dir.join(retrack::data::MANIFEST_FILE).exists() {
                return Err(Failure::Missing(format!("no dataset at {}", dir.display())));
            }
            Ok(load_dataset(dir)?)
        }
        None => Ok(generate(&config::dataset_for_run(cfg))?),
    }
}

fn cmd_gen(cmd: GenCmd) -> CmdResult {
    let cfg = cmd.gen.resolve()?;
    let (ds, _) = generate_dataset(&cfg, &cmd.out)?;
    let result = json!({
        "dir": cmd.out,
        "dataset_hash": ds.content_hash(),
        "config": cfg,
        "samples": { "train": ds.train.len(), "val": ds.val.len(), "test": ds.test.len() },
    });
    Ok(Outcome {
        summary: vec![format!(
            "wrote {} / {} / {} triplets to {}",
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            cmd.out.display()
        )],
        result,
        passed: true,
        out: Some(cmd.out.join("gen.json")),
    })
}

fn cmd_train(cmd: TrainCmd) -> CmdResult {
    let (cfg, ckpt) = match &cmd.resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            let mut cfg = ckpt.config.clone();
            if let Some(steps) = cmd.run.steps {
                cfg.steps = steps;
            }
            (cfg, Some(ckpt))
        }
        None => (cmd.run.resolve(&cmd.weights)?, None),
    };
    let out = cmd
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| Failure::Usage("--out (or \"output\" in the config) is required".into()))?;
    let ds = open_dataset(cmd.data.as_deref(), &cfg)?;
    let trainer = match ckpt {
        Some(mut c) => {
            c.config = cfg.clone();
            Trainer::resume(c, &ds)?
        }
        None => Trainer::new(&cfg, &ds)?,
    };
    let outcome = run_training(trainer, Some(&out))?;
    let ck = &outcome.final_checkpoint;
    let r = &outcome.final_val;
    let result = json!({
        "out": out,
        "steps": ck.step,
        "dataset_hash": ck.dataset_hash,
        "loss_digest": ck.loss_digest,
        "best_step": outcome.best_step,
        "best_val_r1": outcome.best_val_r1,
        "final_val": r,
        "initial_val_r1": outcome.initial_val.recall[0],
    });
    Ok(Outcome {
        summary: vec![
            format!("trained {} steps in {:.1}s", ck.step, outcome.seconds),
            format!(
                "val R@1 {:.4} -> {:.4} (best {:.4} at step {})",
                outcome.initial_val.recall[0], r.recall[0], outcome.best_val_r1, outcome.best_step
            ),
        ],
        result,
        passed: true,
        out: Some(out.join("train.json")),
    })
}

fn cmd_eval(cmd: EvalCmd) -> CmdResult {
    if !cmd.checkpoint.join("ckpt.json").exists() {
        return Err(Failure::Missing(format!("no checkpoint at {}", cmd.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&cmd.checkpoint)?;
    let ds = open_dataset(Some(&cmd.data), &ckpt.config)?;
    let split = ds.split(cmd.split.into());
    let sim = ckpt.config.loss().similarity;
    let report = evaluate_split(&ckpt.params, split, &sim, &DEFAULT_KS)?;
    if let Some(path) = &cmd.export_similarity {
        let queries = compose_split(&split.samples, &ckpt.params)?;
        let ids: Vec<usize> = split.samples.iter().map(|s| s.id).collect();
        let index = build_index(&split_gallery(split), &sim)?;
        export_similarity_matrix(&queries, &ids, &index, path)?;
    }
    let mut summary = vec![report
        .ks
        .iter()
        .zip(&report.recall)
        .map(|(k, r)| format!("R@{k} {r:.4}"))
        .collect::<Vec<_>>()
        .join("  ")];
    if let Some(d) = &report.diagnostics {
        summary.push(format!(
            "mean S(F_c, .): reference {:.4}, modification {:.4}, target {:.4}",
            d.mean_sim_reference, d.mean_sim_modification, d.mean_sim_target
        ));
    }
    Ok(Outcome {
        result: json!({ "checkpoint": cmd.checkpoint, "dataset_hash": ds.content_hash(), "report": report }),
        summary,
        passed: true,
        out: cmd.out,
    })
}

fn cmd_ablate(cmd: AblateCmd) -> CmdResult {
    let cfg = cmd.run.resolve(&cmd.weights)?;
    let ds = open_dataset(cmd.data.as_deref(), &cfg)?;
    let variants = cmd
        .variant_list
        .unwrap_or_else(|| VARIANTS.iter().map(|v| v.to_string()).collect());
    let seeds = cmd.seeds.unwrap_or_else(|| vec![cfg.seed]);
    let report = ablate(&cfg, &ds, &variants, &seeds)?;
    let summary = report.summary();
    let full = summary[0].mean_recall[0];
    let mut lines: Vec<String> = summary
        .iter()
        .map(|s| {
            format!(
                "{:<14} R@1 {:.4}  R@5 {:.4}  R@10 {:.4}",
                s.variant, s.mean_recall[0], s.mean_recall[1], s.mean_recall[2]
            )
        })
        .collect();
    let beaten: Vec<&str> = summary
        .iter()
        .filter(|s| s.mean_recall[0] > full)
        .map(|s| s.variant.as_str())
        .collect();
    let passed = !cmd.check_ordering || beaten.is_empty();
    if !beaten.is_empty() {
        lines.push(format!("variants above the full model: {}", beaten.join(", ")));
    }
    Ok(Outcome {
        result: json!({ "report": report, "summary": summary }),
        summary: lines,
        passed,
        out: cmd.out,
    })
}

fn cmd_gradcheck(cmd: GradcheckCmd) -> CmdResult {
    let cfg = cmd.run.resolve(&cmd.weights)?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    for seed in cfg.seed..cfg.seed + cmd.count {
        let r = gradcheck_pipeline(&cfg, seed, cmd.batch)?;
        let e = r.max_rel_error;
        lines.push(format!(
            "seed {seed}: L_dis {:.2e}  L_dir {:.2e}  L_evi {:.2e}  total {:.2e}  ({} entries, {:.1}s)",
            e[0], e[1], e[2], e[3], r.entries, r.seconds
        ));
        worst = worst.max(r.worst());
        rows.push(r);
    }
    let passed = worst < cmd.tolerance;
    lines.push(format!(
        "max relative error {worst:.3e} ({} {:.0e})",
        if passed { "<" } else { ">=" },
        cmd.tolerance
    ));
    Ok(Outcome {
        result: json!({ "tolerance": cmd.tolerance, "max_rel_error": worst, "passed": passed, "seeds": to_value(&rows)? }),
        summary: lines,
        passed,
        out: cmd.out,
    })
}

fn cmd_dst(cmd: DstCmd) -> CmdResult {
    let r = self_test(cmd.seed, cmd.trials)?;
    let lines = vec![
        format!("worked example: K = {}, m(A) = {:.6}", r.worked_example_conflict, r.worked_example_mass),
        format!(
            "{} trials: pairwise vs brute force {:.1e}, commutativity {:.1e}, associativity {:.1e}, vacuous identity {:.1e}",
            r.trials, r.max_pairwise_vs_brute, r.max_commutativity, r.max_associativity, r.max_vacuous_identity
        ),
        format!(
            "total conflict rejected: {}; {}",
            r.total_conflict_rejected,
            if r.passed { "PASS" } else { "FAIL" }
        ),
    ];
    Ok(Outcome {
        result: json!({ "max_deviation": r.max_deviation(), "report": to_value(&r)? }),
        summary: lines,
        passed: r.passed,
        out: cmd.out,
    })
}

fn cmd_sweep(cmd: SweepCmd) -> CmdResult {
    let cfg = cmd.run.resolve(&WeightArgs::default())?;
    let ds = open_dataset(cmd.data.as_deref(), &cfg)?;
    let report = sweep(&cfg, &ds, &cmd.kappas, &cmd.lambdas)?;
    let lines = report
        .points
        .iter()
        .map(|p| format!("kappa {:<6} lambda {:<6} mean recall {:.4}", p.kappa, p.lambda, p.mean_recall))
        .collect();
    Ok(Outcome {
        result: to_value(&report)?,
        summary: lines,
        passed: true,
        out: cmd.out,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::Gen(c) => ("gen", cmd_gen(c)),
        Command::Train(c) => ("train", cmd_train(c)),
        Command::Eval(c) => ("eval", cmd_eval(c)),
        Command::Ablate(c) => ("ablate", cmd_ablate(c)),
        Command::Gradcheck(c) => ("gradcheck", cmd_gradcheck(c)),
        Command::DstOracle(c) => ("dst-oracle", cmd_dst(c)),
        Command::Sweep(c) => ("sweep", cmd_sweep(c)),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(f) => {
            eprintln!("retrack {name}: {}", f.message());
            return ExitCode::from(f.code());
        }
    };
    for line in &outcome.summary {
        eprintln!("{line}");
    }
    if let Some(path) = &outcome.out {
        if let Err(f) = write_result(path, name, &outcome.result) {
            eprintln!("retrack {name}: {}", f.message());
            return ExitCode::from(f.code());
        }
    }
    match serde_json::to_string_pretty(&outcome.result) {
        Ok(text) => {
            // a closed pipe (e.g. `| head`) is not an error
            let _ = writeln!(std::io::stdout().lock(), "{text}");
        }
        Err(e) => {
            eprintln!("retrack {name}: {e}");
            return ExitCode::from(1);
        }
    }
    if outcome.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    }
}
