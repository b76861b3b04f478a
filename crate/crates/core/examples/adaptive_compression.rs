//! Adaptive Top-k: how the threshold trades compressed rounds against accuracy.
//!
//! cargo run --release --example adaptive_compression

use std::path::Path;

use streamsgd::cli::load_config;
use streamsgd::engine::run_experiment;

fn main() -> streamsgd::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/compression.toml");
    let base = load_config(&path)?;

    let mut dense = base.clone();
    dense.compression = None;
    let reference = run_experiment(&dense)?.summary;
    println!("no compression: accuracy {:.3}, floats {}", reference.final_accuracy, reference.floats_sent);

    println!("{:>5} {:>6} {:>6} {:>9} {:>12} {:>8}", "cr", "delta", "cnc", "accuracy", "floats", "volume");
    for cr in [0.1, 0.01] {
        for delta in [0.1, 0.2, 0.3, 0.4, 1.0] {
            let mut cfg = base.clone();
            if let Some(c) = cfg.compression.as_mut() {
                c.cr = cr;
                c.delta = delta;
            }
            let s = run_experiment(&cfg)?.summary;
            println!(
                "{cr:>5} {delta:>6} {:>6.3} {:>9.3} {:>12} {:>7.1}%",
                s.cnc.unwrap_or(0.0),
                s.final_accuracy,
                s.floats_sent,
                100.0 * s.floats_sent as f64 / reference.floats_sent as f64
            );
        }
    }
    Ok(())
}
