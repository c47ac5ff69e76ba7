//! Command-line driver. Every command resolves one [`RunConfig`], does its
//! work, and writes JSON (or CSV) reports under `--out` that embed the
//! resolved config.
//!
//! Exit codes: 0 success, 1 invalid input, 2 a check failed, 3 numeric
//! failure. Log verbosity comes from `L2A_LOG` (`error` … `trace`).

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::run_bench;
use crate::error::{Error, Result};
use crate::experiments::{initial_model, local_only_ceiling, pruning_experiment, train_and_evaluate};
use crate::inference::threshold_sweep;
use crate::kernel::TileConfig;
use crate::layer::{checkpoint, ForwardOptions};
use crate::training::evaluate;
use crate::verify::{run_verify, Fault};

pub use config::RunConfig;

/// Version of the report envelope.
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const LOG_ENV: &str = "L2A_LOG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "l2a", version, about = "Train, check and prune conditional local/global attention models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (optionally), convert and train a routed model.
    Train,
    /// Evaluate a checkpoint on held-out samples.
    Eval,
    /// Run every self-check and print a pass/fail table.
    Verify,
    /// Count kernel work over a grid of lengths and sparsities.
    Bench,
    /// Measure per-layer sparsity and prune global branches.
    Prune,
    /// Evaluate a checkpoint at several routing thresholds.
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    FlipMaskBit,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for reports and checkpoints.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Dotted-path override, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Sparsity regularization weight.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Disable forced global steps during training.
    #[arg(long, global = true)]
    pub no_mitigation: bool,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    #[arg(long, global = true)]
    pub tile_bq: Option<usize>,
    #[arg(long, global = true)]
    pub tile_bk: Option<usize>,
    /// Corrupt the verify run on purpose.
    #[arg(long, global = true, value_enum)]
    pub fault: Option<FaultArg>,
}

impl CommonArgs {
    /// Config file, then `--set`, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut table = config::load_table(self.config.as_deref())?;
        for o in &self.overrides {
            config::apply_override(&mut table, o)?;
        }
        let mut cfg = config::from_table(table)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda_reg = l;
        }
        if self.no_mitigation {
            cfg.train.collapse_mitigation = false;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if self.tile_bq.is_some() || self.tile_bk.is_some() {
            let tiles = TileConfig {
                b_q: self.tile_bq.unwrap_or(cfg.train.tiles.b_q),
                b_k: self.tile_bk.unwrap_or(cfg.train.tiles.b_k),
            };
            tiles.validate()?;
            cfg.train.tiles = tiles;
            cfg.bench.tiles = tiles;
            cfg.verify.tiles = Some(tiles);
        }
        if let Some(FaultArg::FlipMaskBit) = self.fault {
            cfg.verify.fault = Some(Fault::FlipMaskBit);
        }
        cfg.resolve()
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a RunConfig,
    result: T,
}

fn write_report<T: Serialize>(cfg: &RunConfig, command: &str, result: T) -> Result<PathBuf> {
    let path = cfg.out.join(format!("{command}.json"));
    let env = Envelope {
        schema_version: REPORT_SCHEMA_VERSION,
        command,
        config: cfg,
        result,
    };
    let mut text = serde_json::to_string_pretty(&env)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// What a command concluded apart from hard errors.
enum Outcome {
    Ok,
    CheckFailed(String),
}

fn load_checkpoint(cfg: &RunConfig) -> Result<crate::layer::ToyModel> {
    let path = cfg.checkpoint_path();
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no checkpoint at {}", path.display())));
    }
    checkpoint::load(&path)
}

#[derive(Serialize)]
struct TrainSummary {
    base_steps: usize,
    base_final_ntp: Option<f64>,
    final_step: Option<crate::training::StepReport>,
    first_fully_sparse_step: Option<usize>,
    eval: crate::training::EvalReport,
    local_only_accuracy: f64,
}

fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let (start, base_log) = initial_model(&cfg.model, &cfg.task, &cfg.base, cfg.seed)?;
    if !base_log.is_empty() {
        write_jsonl(&cfg.out.join("base_log.jsonl"), &base_log)?;
    }
    let evals = cfg.eval.samples(&cfg.task)?;
    let (model, log, summary) = train_and_evaluate(&start, &cfg.task, &cfg.train, &evals, |r| {
        if r.step % 50 == 0 {
            log::info!("step {} ntp {:.4} reg {:.4} sparsity {:?}", r.step, r.ntp_loss, r.reg_loss, r.sparsity);
        }
    })?;
    write_jsonl(&cfg.out.join("train_log.jsonl"), &log)?;
    checkpoint::save(&model, &cfg.out.join("checkpoint.json"))?;
    let ceiling = local_only_ceiling(&model, &evals)?;
    println!(
        "trained {} steps: needle accuracy {:.3} (local only {:.3}), sparsity {:?}",
        log.len(),
        summary.eval.needle_accuracy,
        ceiling.needle_accuracy,
        summary.eval.sparsity
    );
    write_report(
        cfg,
        "train",
        TrainSummary {
            base_steps: base_log.len(),
            base_final_ntp: base_log.last().map(|r| r.ntp_loss),
            final_step: summary.final_step,
            first_fully_sparse_step: summary.first_fully_sparse_step,
            eval: summary.eval,
            local_only_accuracy: ceiling.needle_accuracy,
        },
    )?;
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct EvalSummary {
    eval: crate::training::EvalReport,
    local_only: crate::training::EvalReport,
}

fn cmd_eval(cfg: &RunConfig) -> Result<Outcome> {
    let model = load_checkpoint(cfg)?;
    let evals = cfg.eval.samples(&cfg.task)?;
    let eval = evaluate(&model, &evals, &ForwardOptions::eval().with_tiles(cfg.train.tiles))?;
    let local_only = local_only_ceiling(&model, &evals)?;
    println!(
        "needle accuracy {:.3} (local only {:.3}), sparsity {:?}",
        eval.needle_accuracy, local_only.needle_accuracy, eval.sparsity
    );
    write_report(cfg, "eval", EvalSummary { eval, local_only })?;
    Ok(Outcome::Ok)
}

fn cmd_verify(cfg: &RunConfig) -> Result<Outcome> {
    let report = run_verify(&cfg.verify)?;
    print!("{}", report.table());
    let failed: Vec<String> = report.failed().into_iter().map(String::from).collect();
    write_report(cfg, "verify", &report)?;
    if failed.is_empty() {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::CheckFailed(format!("failed checks: {}", failed.join(", "))))
    }
}

fn cmd_bench(cfg: &RunConfig) -> Result<Outcome> {
    let report = run_bench(&cfg.bench)?;
    fs::write(cfg.out.join("bench.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    let ok = report.all_match_model;
    write_report(cfg, "bench", &report)?;
    if ok {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::CheckFailed("kernel counters disagree with the closed-form model".into()))
    }
}

fn cmd_prune(cfg: &RunConfig) -> Result<Outcome> {
    let model = load_checkpoint(cfg)?;
    let calib = cfg.eval.calibration(&cfg.task, cfg.prune.calib_samples)?;
    let evals = cfg.eval.samples(&cfg.task)?;
    let (pruned, exp) = pruning_experiment(&model, &calib, &evals, cfg.prune.threshold)?;
    checkpoint::save(&pruned, &cfg.out.join("pruned_checkpoint.json"))?;
    println!(
        "pruned layers {:?} (sparsity {:?}); accuracy {:.3} -> {:.3}; global KV savings {:.3}",
        exp.report.pruned_layer_ids, exp.report.sparsities, exp.accuracy_before, exp.accuracy_after, exp.report.kv_savings_fraction
    );
    write_report(cfg, "prune", &exp)?;
    Ok(Outcome::Ok)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<Outcome> {
    let model = load_checkpoint(cfg)?;
    let evals = cfg.eval.samples(&cfg.task)?;
    let report = threshold_sweep(&model, &evals, &cfg.sweep.thresholds, &ForwardOptions::eval().with_tiles(cfg.train.tiles))?;
    for p in &report.points {
        println!(
            "threshold {:>5}: sparsity {:?} macs {} accuracy {:.3}",
            p.threshold, p.layer_sparsity, p.global_macs, p.needle_accuracy
        );
    }
    let ok = report.first_layer_monotone && report.macs_track_sparsity;
    write_report(cfg, "sweep", &report)?;
    if ok {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::CheckFailed("sweep monotonicity violated".into()))
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_INVALID,
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let cfg = match cli.common.resolve() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    if let Err(e) = fs::create_dir_all(&cfg.out) {
        eprintln!("error: cannot create {}: {e}", cfg.out.display());
        return EXIT_INVALID;
    }
    let outcome = match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Verify => cmd_verify(&cfg),
        Command::Bench => cmd_bench(&cfg),
        Command::Prune => cmd_prune(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
    };
    match outcome {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK_FAILED
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
