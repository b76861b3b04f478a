//! One label per device: plateau accuracy with and without (alpha, beta)
//! data injection, and the bytes it costs.
//!
//! cargo run --release --example data_injection

use std::path::Path;

use streamsgd::cli::load_config;
use streamsgd::datagen::{InjectionConfig, PartitionPlan};
use streamsgd::engine::run_experiment;

fn main() -> streamsgd::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/noniid.toml");
    let base = load_config(&path)?;

    let mut iid = base.clone();
    iid.partition = PartitionPlan::IID;
    iid.injection = None;
    let s = run_experiment(&iid)?.summary;
    println!("iid reference: accuracy {:.3}", s.final_accuracy);

    println!("{:>6} {:>6} {:>9} {:>16}", "alpha", "beta", "accuracy", "injected MiB");
    for (alpha, beta) in [(0.0, 0.0), (0.05, 0.05), (0.1, 0.1), (0.25, 0.25), (0.5, 0.5)] {
        let mut cfg = base.clone();
        cfg.injection = Some(InjectionConfig { alpha, beta });
        let s = run_experiment(&cfg)?.summary;
        println!(
            "{alpha:>6} {beta:>6} {:>9.3} {:>16.1}",
            s.final_accuracy,
            s.injection_bytes as f64 / (1u64 << 20) as f64
        );
    }
    Ok(())
}
