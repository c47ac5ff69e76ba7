//! Learned routing against a context-free control that routes each token
//! independently at the same keep rate.
//!
//! Usage: `cargo run --release --example routing_control [key=value ...]`
//! where each argument overrides the default run config, e.g.
//! `train.lambda_reg=1.0`. `seeds=0,1,2` picks the training seeds.

use l2a::cli::config::{apply_override, from_table};
use l2a::experiments::{initial_model, routing_control_experiment};

fn main() -> l2a::Result<()> {
    let mut table = toml::Table::new();
    let mut seeds = vec![0, 1, 2];
    for a in std::env::args().skip(1) {
        match a.strip_prefix("seeds=") {
            Some(list) => {
                seeds = list.split(',').map(|s| s.trim().parse().map_err(|_| l2a::Error::Config(format!("bad seed '{s}'")))).collect::<l2a::Result<_>>()?
            }
            None => apply_override(&mut table, &a)?,
        }
    }
    let cfg = from_table(table)?.resolve()?;
    let (start, _) = initial_model(&cfg.model, &cfg.task, &cfg.base, cfg.seed)?;
    let evals = cfg.eval.samples(&cfg.task)?;
    let report = routing_control_experiment(&start, &cfg.task, &cfg.train, &evals, &seeds)?;
    for r in &report.runs {
        println!(
            "seed {}: learned acc {:.3} sparsity {:?} | control keep {:.4} acc {:.3} sparsity {:?}",
            r.seed, r.learned.eval.needle_accuracy, r.learned.eval.sparsity, r.control_keep_p, r.control.eval.needle_accuracy, r.control.eval.sparsity
        );
    }
    println!("min accuracy gap {:.3}, max sparsity gap {:.4}", report.min_accuracy_gap, report.max_sparsity_gap);
    Ok(())
}
