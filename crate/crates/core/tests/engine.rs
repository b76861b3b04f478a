use proptest::prelude::*;

use streamsgd::comm::GateInput;
use streamsgd::datagen::{DatasetSpec, InjectionConfig, PartitionPlan};
use streamsgd::engine::{
    compute_batch_size, run_experiment, CompressionConfig, CostModel, Mode, ModelSpec, OptimizerSpec, RateSource,
    SimConfig, Simulation,
};
use streamsgd::streams::{RateDistribution, RetentionPolicy, DEFAULT_SAMPLE_BYTES};

fn base(mode: Mode, rates: Vec<u32>) -> SimConfig {
    SimConfig {
        seed: 3,
        n_devices: rates.len(),
        mode,
        fixed_batch: 16,
        b_min: 4,
        b_max: 256,
        retention: RetentionPolicy::Persistence,
        prefill_secs: 0.0,
        rate_jitter: false,
        sample_bytes: DEFAULT_SAMPLE_BYTES,
        augment_std: 0.0,
        max_epochs: 3,
        max_iterations: None,
        target_accuracy: None,
        eval_every: None,
        rates: RateSource::Fixed(rates),
        dataset: DatasetSpec {
            n_classes: 4,
            feature_dim: 6,
            samples_per_class: 40,
            cluster_spread: 0.8,
            mean_scale: 1.0,
        },
        partition: PartitionPlan::IID,
        model: ModelSpec { hidden: vec![5] },
        optimizer: OptimizerSpec {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![(2, 0.1)],
            base_global_batch: None,
        },
        cost: CostModel { compute_base: 0.5, compute_per_sample: 0.002, latency: 0.001, bandwidth: 1e6 },
        compression: None,
        injection: None,
    }
}

#[test]
fn weighted_mode_uses_linear_scaling() {
    let cfg = base(Mode::Scadles, vec![10, 30, 60]);
    let mut sim = Simulation::new(cfg).unwrap();
    let row = sim.run_iteration().unwrap();
    // base 0.05 * 100 / (3 * 64)
    assert!((row.lr_used - 0.05 * 100.0 / 192.0).abs() < 1e-15);
    assert_eq!(row.global_batch, 100);
}

#[test]
fn ddl_uses_schedule_only() {
    let mut cfg = base(Mode::DdlFixedBatch, vec![10, 30, 60]);
    cfg.max_epochs = 3;
    let out = run_experiment(&cfg).unwrap();
    for m in &out.metrics {
        let expected = if m.epoch >= 2 { 0.005 } else { 0.05 };
        assert!((m.lr_used - expected).abs() < 1e-15, "epoch {} lr {}", m.epoch, m.lr_used);
        assert_eq!(m.global_batch, 48);
    }
}

#[test]
fn injection_bytes_are_recorded() {
    let mut cfg = base(Mode::Scadles, vec![10, 20, 30, 40]);
    cfg.injection = Some(InjectionConfig { alpha: 0.5, beta: 0.5 });
    let mut sim = Simulation::new(cfg).unwrap();
    let mut cum = 0;
    for _ in 0..10 {
        let row = sim.run_iteration().unwrap();
        // Two senders, each sharing ceil(b/2) samples with three peers.
        assert!(row.injection_bytes > 0);
        assert_eq!(row.injection_bytes % (3 * DEFAULT_SAMPLE_BYTES), 0);
        cum += row.injection_bytes;
        assert_eq!(row.injection_bytes_cum, cum);
    }
}

#[test]
fn compression_off_counts_dense_payloads() {
    let cfg = base(Mode::Scadles, vec![10, 20]);
    let dim = cfg.architecture().param_count() as u64;
    let mut sim = Simulation::new(cfg).unwrap();
    let row = sim.run_iteration().unwrap();
    assert_eq!(row.floats_sent_cum, 2 * dim);
    assert_eq!(row.bytes_sent_cum, 8 * dim);
    assert_eq!(row.cnc_cum, None);
}

#[test]
fn raw_and_smoothed_gates_both_run() {
    for gate in [GateInput::Smoothed, GateInput::Raw] {
        let mut cfg = base(Mode::Scadles, vec![10, 20, 30]);
        cfg.compression = Some(CompressionConfig { cr: 0.1, delta: 0.3, ewma_factor: 0.9, gate });
        let out = run_experiment(&cfg).unwrap();
        let cnc = out.summary.cnc.unwrap();
        assert!((0.0..=1.0).contains(&cnc));
    }
}

#[test]
fn noniid_devices_see_one_label() {
    let mut cfg = base(Mode::Scadles, vec![10, 20, 30, 40]);
    cfg.partition = PartitionPlan::noniid(1);
    let sim = Simulation::new(cfg).unwrap();
    let labels = &sim.dataset().train.labels;
    for pool in sim.pools() {
        let first = labels[pool[0]];
        assert!(pool.iter().all(|&i| labels[i] == first));
    }
}

#[test]
fn sampled_rates_are_reproducible() {
    let mut cfg = base(Mode::Scadles, vec![1; 6]);
    cfg.rates = RateSource::Sampled(RateDistribution::uniform(38.0, 24.0));
    let a = Simulation::new(cfg.clone()).unwrap().rates().to_vec();
    let b = Simulation::new(cfg.clone()).unwrap().rates().to_vec();
    cfg.seed += 1;
    let c = Simulation::new(cfg).unwrap().rates().to_vec();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn iteration_invariants(
        rates in prop::collection::vec(1u32..120, 2..5),
        scadles in any::<bool>(),
        truncate in any::<bool>(),
        compress in any::<bool>(),
        inject in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let mode = if scadles { Mode::Scadles } else { Mode::DdlFixedBatch };
        let mut cfg = base(mode, rates.clone());
        cfg.seed = seed;
        cfg.retention = if truncate { RetentionPolicy::Truncation } else { RetentionPolicy::Persistence };
        if compress {
            cfg.compression = Some(CompressionConfig { cr: 0.2, delta: 0.2, ewma_factor: 0.9, gate: GateInput::Smoothed });
        }
        if inject {
            cfg.injection = Some(InjectionConfig { alpha: 0.5, beta: 0.25 });
        }
        let expected_batch: usize = rates.iter().map(|&r| compute_batch_size(mode, r, cfg.b_min, cfg.b_max, cfg.fixed_batch)).sum();
        let mut sim = Simulation::new(cfg).unwrap();
        let mut prev_time = 0.0;
        let mut prev_floats = 0;
        for _ in 0..15 {
            let row = sim.run_iteration().unwrap();
            prop_assert!(sim.replicas_identical());
            prop_assert!(row.sim_time_s > prev_time);
            prop_assert!(row.floats_sent_cum > prev_floats);
            prop_assert_eq!(row.global_batch, expected_batch);
            prop_assert!(row.wait_time_s >= 0.0);
            if truncate {
                for (occ, &r) in row.buffer_occupancy.iter().zip(&rates) {
                    prop_assert!(*occ <= r as usize);
                }
            }
            prev_time = row.sim_time_s;
            prev_floats = row.floats_sent_cum;
        }
    }

    #[test]
    fn scadles_wait_vanishes_when_compute_covers_a_second(
        rates in prop::collection::vec(4u32..300, 2..6),
    ) {
        let mut cfg = base(Mode::Scadles, rates);
        cfg.cost.compute_base = 1.0;
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run_iteration().unwrap();
        for _ in 0..10 {
            prop_assert_eq!(sim.run_iteration().unwrap().wait_time_s, 0.0);
        }
    }
}
