//! A single slow stream stalls every fixed-batch iteration; rate-proportional
//! batches never wait once the buffers are primed.
//!
//! cargo run --example straggler_wait

use std::path::Path;

use streamsgd::cli::load_config;
use streamsgd::engine::{Mode, RateSource, Simulation};

fn main() -> streamsgd::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/speedup.toml");
    let mut cfg = load_config(&path)?;
    cfg.n_devices = 4;
    cfg.rates = RateSource::Fixed(vec![27, 300, 300, 300]);
    cfg.target_accuracy = None;

    for mode in [Mode::DdlFixedBatch, Mode::Scadles] {
        cfg.mode = mode;
        let mut sim = Simulation::new(cfg.clone())?;
        let waits: Vec<String> = (0..6)
            .map(|_| sim.run_iteration().map(|r| format!("{:.3}", r.wait_time_s)))
            .collect::<streamsgd::Result<_>>()?;
        println!("{mode:?}: batches {:?}, waits {}", sim.batch_sizes(), waits.join(" "));
    }
    Ok(())
}
