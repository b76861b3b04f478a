//! Fixed-batch DDL vs. rate-proportional batches with weighted aggregation on
//! heterogeneous streams: simulated time to reach the target accuracy.
//!
//! cargo run --release --example weighted_aggregation

use std::path::Path;

use streamsgd::cli::load_config;
use streamsgd::engine::{run_experiment, Mode};

fn main() -> streamsgd::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/speedup.toml");
    let base = load_config(&path)?;
    println!("target accuracy {:.0}%", base.target_accuracy.unwrap_or(0.0) * 100.0);
    println!("{:>4} {:>10} {:>10} {:>8}", "seed", "ddl (s)", "scadles (s)", "speedup");
    for seed in 1..=5 {
        let mut times = Vec::new();
        for mode in [Mode::DdlFixedBatch, Mode::Scadles] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.mode = mode;
            let out = run_experiment(&cfg)?;
            times.push(out.summary.time_to_target_s.unwrap_or(f64::INFINITY));
        }
        println!("{seed:>4} {:>10.1} {:>10.1} {:>7.2}x", times[0], times[1], times[0] / times[1]);
    }
    Ok(())
}
