//! Runs the built-in self-check suite and prints the result table.
//! Pass `--fault` to flip one routing bit and watch a check catch it.

use l2a::verify::{run_verify, Fault, VerifyConfig};

fn main() -> l2a::Result<()> {
    let fault = std::env::args().any(|a| a == "--fault").then_some(Fault::FlipMaskBit);
    let report = run_verify(&VerifyConfig { fault, ..VerifyConfig::default() })?;
    print!("{}", report.table());
    std::process::exit(if report.passed { 0 } else { 2 });
}
