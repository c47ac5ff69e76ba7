//! Trains a routed model on associative recall, then prunes every layer
//! whose router skips at least 95% of calibration tokens and reports the
//! accuracy change and KV-cache savings.
//!
//! Usage: `cargo run --release --example prune_assoc [key=value ...]`

use l2a::cli::config::{apply_override, from_table};
use l2a::experiments::{initial_model, pruning_experiment, train_and_evaluate};
use l2a::inference::KvCacheLedger;

fn main() -> l2a::Result<()> {
    let mut table = toml::Table::new();
    let defaults = [
        "task.kind=assoc_recall",
        "task.num_values=4",
        "task.num_queries=16",
        "base.lr=1e-3",
        "base.warmup_steps=2000",
        "base.steps=400",
        "train.lambda_reg=0.1",
        "train.lr=1e-3",
        "train.steps=700",
    ];
    for a in defaults.into_iter().map(String::from).chain(std::env::args().skip(1)) {
        apply_override(&mut table, &a)?;
    }
    let cfg = from_table(table)?.resolve()?;
    let (start, _) = initial_model(&cfg.model, &cfg.task, &cfg.base, cfg.seed)?;
    let evals = cfg.eval.samples(&cfg.task)?;
    let init = l2a::training::evaluate(&start, &evals, &l2a::layer::ForwardOptions::eval())?;
    println!("converted start: accuracy {:.3}", init.needle_accuracy);
    let (model, _, summary) = train_and_evaluate(&start, &cfg.task, &cfg.train, &evals, |_| {})?;
    println!("trained: accuracy {:.3}, sparsity {:?}", summary.eval.needle_accuracy, summary.eval.sparsity);

    let calib = cfg.eval.calibration(&cfg.task, cfg.prune.calib_samples)?;
    let (pruned, exp) = pruning_experiment(&model, &calib, &evals, cfg.prune.threshold)?;
    println!("calibration sparsity {:?}, pruned layers {:?}", exp.report.sparsities, exp.report.pruned_layer_ids);
    println!("accuracy {:.3} -> {:.3} (delta {:+.3})", exp.accuracy_before, exp.accuracy_after, exp.accuracy_delta);
    let before = KvCacheLedger::predicted(&model, cfg.task.n);
    let after = KvCacheLedger::predicted(&pruned, cfg.task.n);
    println!(
        "KV bytes at n={}: {} -> {} (global savings {:.3}, counted cache matches closed form: {})",
        cfg.task.n, before.total_bytes, after.total_bytes, exp.report.kv_savings_fraction, exp.ledger_counted_matches
    );
    Ok(())
}
