//! Persistence vs. truncation on constant-rate streams, next to the closed form.
//!
//! cargo run --release --example buffer_growth

use std::path::Path;

use streamsgd::cli::load_config;
use streamsgd::engine::Simulation;
use streamsgd::streams::{analytic_queue_size, QueueForm, QueueModelParams, RetentionPolicy};

fn main() -> streamsgd::Result<()> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/buffer_growth.toml");
    let cfg = load_config(&path)?;

    let mut persist = Simulation::new(cfg.clone())?;
    let mut trunc = Simulation::new(streamsgd::engine::SimConfig { retention: RetentionPolicy::Truncation, ..cfg })?;

    println!("{:>6} {:>12} {:>12} {:>12}", "T", "persistence", "closed form", "truncation");
    for step in 1..=1000u64 {
        let p = persist.run_iteration()?;
        let t = trunc.run_iteration()?;
        if step.is_power_of_two() || step % 250 == 0 {
            let q =
                analytic_queue_size(&QueueModelParams { t: 1.2, rate: 300.0, b: 64, steps: step }, QueueForm::Exact)?;
            println!("{step:>6} {:>12} {:>12.0} {:>12}", p.buffer_occupancy[0], q.samples, t.buffer_occupancy[0]);
        }
    }
    let (p, t) = (persist.buffer_samples(), trunc.buffer_samples());
    println!("final occupancy ratio {:.1}x", p as f64 / t as f64);
    Ok(())
}
