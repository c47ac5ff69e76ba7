//! Router collapse under a strong sparsity penalty, with and without forced
//! global steps.
//!
//! Usage: `cargo run --release --example router_collapse [key=value ...]`

use l2a::cli::config::{apply_override, from_table};
use l2a::experiments::{collapse_experiment, initial_model};

fn main() -> l2a::Result<()> {
    let mut table = toml::Table::new();
    for a in ["train.lambda_reg=5.0"].into_iter().map(String::from).chain(std::env::args().skip(1)) {
        apply_override(&mut table, &a)?;
    }
    let cfg = from_table(table)?.resolve()?;
    let (start, _) = initial_model(&cfg.model, &cfg.task, &cfg.base, cfg.seed)?;
    let evals = cfg.eval.samples(&cfg.task)?;
    let r = collapse_experiment(&start, &cfg.task, &cfg.train, &evals)?;
    for (name, run) in [("mitigation off", &r.mitigation_off), ("mitigation on", &r.mitigation_on)] {
        println!(
            "{name:>14}: accuracy {:.3}, sparsity {:?}, first fully sparse step {:?}",
            run.eval.needle_accuracy, run.eval.sparsity, run.first_fully_sparse_step
        );
    }
    println!("local-only accuracy {:.3}, margin {:+.3}", r.local_only_accuracy, r.margin);
    Ok(())
}
