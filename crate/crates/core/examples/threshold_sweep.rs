//! Trains a small routed model, then sweeps the routing threshold at
//! inference to trade accuracy for global-attention work.
//!
//! Usage: `cargo run --release --example threshold_sweep [key=value ...]`

use l2a::cli::config::{apply_override, from_table};
use l2a::experiments::{initial_model, train_and_evaluate};
use l2a::inference::threshold_sweep;
use l2a::layer::ForwardOptions;

fn main() -> l2a::Result<()> {
    let mut table = toml::Table::new();
    for a in ["train.lambda_reg=0.5", "train.steps=200"].into_iter().map(String::from).chain(std::env::args().skip(1)) {
        apply_override(&mut table, &a)?;
    }
    let cfg = from_table(table)?.resolve()?;
    let (start, _) = initial_model(&cfg.model, &cfg.task, &cfg.base, cfg.seed)?;
    let evals = cfg.eval.samples(&cfg.task)?;
    let (model, _, _) = train_and_evaluate(&start, &cfg.task, &cfg.train, &evals, |_| {})?;
    let r = threshold_sweep(&model, &evals, &cfg.sweep.thresholds, &ForwardOptions::eval())?;
    println!("threshold  sparsity per layer        global MACs   accuracy");
    for p in &r.points {
        let sp: Vec<String> = p.layer_sparsity.iter().map(|s| format!("{s:.3}")).collect();
        println!("{:>9}  {:<24}  {:>11}   {:.3}", p.threshold, sp.join(" "), p.global_macs, p.needle_accuracy);
    }
    println!("first layer monotone: {}, MACs track sparsity: {}", r.first_layer_monotone, r.macs_track_sparsity);
    Ok(())
}
