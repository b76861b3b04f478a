//! Per-device data inflow: rate sampling, streaming buffers with retention
//! policies, and the analytic queue-growth model.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Integer snapping tolerance for arrival counts. Products such as
/// `(64 / 27) * 27` must yield 64 arrivals, not 63.
const ARRIVAL_EPS: f64 = 1e-9;

/// Default storage footprint of one sample (a 32x32 RGB image).
pub const DEFAULT_SAMPLE_BYTES: u64 = 3 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Uniform,
    Normal,
}

/// Distribution of per-device streaming rates, in samples/second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateDistribution {
    pub kind: RateKind,
    pub mean: f64,
    pub std: f64,
}

impl RateDistribution {
    pub const fn uniform(mean: f64, std: f64) -> Self {
        RateDistribution { kind: RateKind::Uniform, mean, std }
    }

    pub const fn normal(mean: f64, std: f64) -> Self {
        RateDistribution { kind: RateKind::Normal, mean, std }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean > 0.0 && self.mean.is_finite()) {
            return Err(Error::config(format!("rate mean must be positive, got {}", self.mean)));
        }
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(Error::config(format!("rate std must be non-negative, got {}", self.std)));
        }
        Ok(())
    }

    /// Support of the uniform kind: the unique uniform law with this mean and std.
    pub fn uniform_support(&self) -> (f64, f64) {
        let half = self.std * 3f64.sqrt();
        (self.mean - half, self.mean + half)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            RateKind::Uniform => {
                let (lo, hi) = self.uniform_support();
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    self.mean
                }
            }
            RateKind::Normal => {
                if self.std == 0.0 {
                    self.mean
                } else {
                    Normal::new(self.mean, self.std).expect("validated").sample(rng)
                }
            }
        }
    }
}

/// Reference rate sets: S1, S2 (uniform) and S1', S2' (normal).
pub mod presets {
    use super::RateDistribution;

    pub const S1: RateDistribution = RateDistribution::uniform(38.0, 24.0);
    pub const S2: RateDistribution = RateDistribution::uniform(300.0, 112.0);
    pub const S1_PRIME: RateDistribution = RateDistribution::normal(64.0, 24.0);
    pub const S2_PRIME: RateDistribution = RateDistribution::normal(256.0, 28.0);
}

/// Samples `n` integer streaming rates. Each draw is rounded to the nearest
/// integer and clamped to at least 1.
pub fn sample_rates(dist: &RateDistribution, n: usize, seed: u64) -> Result<Vec<u32>> {
    if n == 0 {
        return Err(Error::config("cannot sample rates for zero devices"));
    }
    dist.validate()?;
    let mut rng = seed::rng(seed);
    Ok((0..n)
        .map(|_| {
            let r = dist.draw(&mut rng).round();
            if r < 1.0 {
                1
            } else {
                r.min(u32::MAX as f64) as u32
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionPolicy {
    /// Keep every unconsumed sample.
    Persistence,
    /// Keep only the newest `rate` samples.
    Truncation,
}

/// Opaque sample identifier: the arrival sequence number on one device.
pub type SampleId = u64;

/// FIFO of pending samples on one device.
#[derive(Debug, Clone)]
pub struct StreamBuffer {
    pending: VecDeque<SampleId>,
    rate: u32,
    policy: RetentionPolicy,
    credit: f64,
    next_id: SampleId,
}

impl StreamBuffer {
    pub fn new(rate: u32, policy: RetentionPolicy) -> Self {
        assert!(rate >= 1, "streaming rate must be at least 1");
        StreamBuffer { pending: VecDeque::new(), rate, policy, credit: 0.0, next_id: 0 }
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    /// Changes the streaming rate (rate-jitter mode). Pending samples are kept.
    pub fn set_rate(&mut self, rate: u32) {
        assert!(rate >= 1, "streaming rate must be at least 1");
        self.rate = rate;
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn fractional_credit(&self) -> f64 {
        self.credit
    }

    /// Pending sample ids, oldest first.
    pub fn pending(&self) -> impl Iterator<Item = SampleId> + '_ {
        self.pending.iter().copied()
    }

    /// Total number of samples that have ever arrived.
    pub fn arrived(&self) -> u64 {
        self.next_id
    }

    /// Adds the samples that arrive during `elapsed` seconds, carrying the
    /// non-integer remainder over to the next call.
    pub fn enqueue_arrivals(&mut self, elapsed: f64) -> Result<usize> {
        if !(elapsed >= 0.0) || !elapsed.is_finite() {
            return Err(Error::config(format!("elapsed time must be a non-negative number, got {elapsed}")));
        }
        let exact = f64::from(self.rate) * elapsed + self.credit;
        let whole = (exact + ARRIVAL_EPS).floor();
        self.credit = (exact - whole).clamp(0.0, 1.0 - f64::EPSILON);
        let added = whole as usize;
        self.pending.extend(self.next_id..self.next_id + added as u64);
        self.next_id += added as u64;
        Ok(added)
    }

    /// Removes and returns the `b` oldest samples.
    pub fn draw_batch(&mut self, b: usize) -> Result<Vec<SampleId>> {
        if self.pending.len() < b {
            return Err(Error::WouldBlock { shortfall: b - self.pending.len() });
        }
        Ok(self.pending.drain(..b).collect())
    }

    /// Applies the retention policy and returns the number of samples discarded.
    pub fn apply_retention(&mut self) -> usize {
        match self.policy {
            RetentionPolicy::Persistence => 0,
            RetentionPolicy::Truncation => {
                let excess = self.pending.len().saturating_sub(self.rate as usize);
                self.pending.drain(..excess);
                excess
            }
        }
    }
}

/// Seconds to wait until `b` samples are available, given `buffer_len`
/// already pending and an inflow of `rate` samples/second.
pub fn streaming_wait(buffer_len: usize, b: usize, rate: u32) -> f64 {
    if buffer_len >= b {
        0.0
    } else {
        (b - buffer_len) as f64 / f64::from(rate)
    }
}

/// Parameters of the closed-form queue-growth model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueModelParams {
    /// Iteration time in seconds.
    pub t: f64,
    /// Streaming rate in samples/second.
    pub rate: f64,
    /// Batch size.
    pub b: u64,
    /// Number of elapsed timesteps (iterations).
    pub steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueForm {
    /// `(t*S - b) * T + S`, valid for `t*S >= b`.
    Exact,
    /// `T*t*S + S`, the large-`t*S` approximation.
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueSize {
    pub samples: f64,
    pub approximate: bool,
}

impl QueueSize {
    pub fn bytes(&self, sample_bytes: u64) -> f64 {
        self.samples * sample_bytes as f64
    }

    /// Storage in GiB (2^30 bytes).
    pub fn gib(&self, sample_bytes: u64) -> f64 {
        self.bytes(sample_bytes) / (1u64 << 30) as f64
    }
}

/// Pending samples on a persistence buffer after `p.steps` iterations.
pub fn analytic_queue_size(p: &QueueModelParams, form: QueueForm) -> Result<QueueSize> {
    let ts = p.t * p.rate;
    let steps = p.steps as f64;
    match form {
        QueueForm::Exact => {
            if ts < p.b as f64 {
                return Err(Error::QueueDomain { ts, b: p.b });
            }
            Ok(QueueSize { samples: (ts - p.b as f64) * steps + p.rate, approximate: false })
        }
        QueueForm::Approximate => Ok(QueueSize { samples: steps * ts + p.rate, approximate: true }),
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn arrivals_conserve_mass(rate in 1u32..2_000, steps in prop::collection::vec(0.0f64..3.0, 1..60)) {
            let mut buf = StreamBuffer::new(rate, RetentionPolicy::Persistence);
            let mut total = 0usize;
            for &dt in &steps {
                total += buf.enqueue_arrivals(dt).unwrap();
                prop_assert!(buf.fractional_credit() >= 0.0 && buf.fractional_credit() < 1.0);
            }
            let elapsed: f64 = steps.iter().sum();
            let expected = (f64::from(rate) * elapsed).floor();
            prop_assert!((total as f64 - expected).abs() <= 1.0);
        }

        #[test]
        fn truncation_bounds_occupancy(rate in 1u32..500, steps in prop::collection::vec((0.0f64..4.0, 0usize..400), 1..40)) {
            let mut buf = StreamBuffer::new(rate, RetentionPolicy::Truncation);
            for &(dt, b) in &steps {
                buf.enqueue_arrivals(dt).unwrap();
                let _ = buf.draw_batch(b.min(buf.len()));
                buf.apply_retention();
                prop_assert!(buf.len() <= rate as usize);
                let ids: Vec<_> = buf.pending().collect();
                prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
