//! Kernel work counters over context lengths and routing sparsities, as CSV.
//! Pass `--timing` to also record wall time.

use l2a::bench::{run_bench, BenchConfig};

fn main() -> l2a::Result<()> {
    let timing = std::env::args().any(|a| a == "--timing");
    let report = run_bench(&BenchConfig { timing, ..BenchConfig::default() })?;
    print!("{}", report.to_csv());
    eprintln!("counters match closed form: {}", report.all_match_model);
    Ok(())
}
