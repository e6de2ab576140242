//! Runs the finite-difference suite and prints per-op errors.
//!
//! cargo run --release --example gradcheck -- [seed] [trials]

use monovit::gradcheck::{run_suite, DEFAULT_TRIALS};

fn main() -> monovit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let trials = args
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(DEFAULT_TRIALS);
    let report = run_suite(seed, trials, None)?;
    println!("{}", report.format_table());
    if !report.passed() {
        eprintln!("failed: {}", report.failed().join(", "));
        std::process::exit(3);
    }
    Ok(())
}
