//! The synchronous multi-device training loop on a simulated clock.
//!
//! One global iteration:
//!
//! 1. every device picks its batch size (fixed in DDL mode, its clamped
//!    streaming rate in rate-proportional mode);
//! 2. all devices wait at a barrier until the slowest stream has delivered
//!    a full batch, and samples keep arriving while they wait;
//! 3. batches are drawn, optionally augmented by data injection;
//! 4. each replica computes its gradient, optionally through the adaptive
//!    compression gate;
//! 5. gradients are folded with rate weights (or uniformly), the learning
//!    rate is scaled, and every replica takes the same optimizer step;
//! 6. the clock advances by wait + max compute + allreduce time, samples
//!    arriving during compute and communication are enqueued, and the
//!    retention policy is applied.
//!
//! Retention runs after the end-of-iteration arrivals, so a truncating
//! buffer holds at most `S` samples at every iteration boundary.

use serde::{Deserialize, Serialize};

use crate::comm::{
    self, account_volume, comm_time, compression_gate, weighted_aggregate, weights_from_rates, AggregationWeights,
    CompressionState, GateInput, GradientVector, LinkModel, VolumeStats,
};
use crate::datagen::{
    self, generate_dataset, injection_plan, partition, Dataset, DatasetSpec, InjectionConfig, PartitionPlan,
};
use crate::error::{Error, Result};
use crate::nn::{scale_lr, Architecture, Batch, Classifier, SgdMomentum, StepSchedule};
use crate::seed;
use crate::streams::{
    sample_rates, streaming_wait, RateDistribution, RateKind, RetentionPolicy, StreamBuffer, DEFAULT_SAMPLE_BYTES,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Conventional data-parallel SGD: every device uses the same batch size,
    /// gradients are averaged uniformly.
    DdlFixedBatch,
    /// Batch size tracks the streaming rate; gradients are rate-weighted and
    /// the learning rate follows the linear scaling rule.
    Scadles,
}

/// Where device streaming rates come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRates", into = "RawRates")]
pub enum RateSource {
    Sampled(RateDistribution),
    Fixed(Vec<u32>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<RateKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fixed: Option<Vec<u32>>,
}

impl TryFrom<RawRates> for RateSource {
    type Error = String;

    fn try_from(raw: RawRates) -> std::result::Result<Self, String> {
        match raw {
            RawRates { kind: None, mean: None, std: None, fixed: Some(v) } => Ok(RateSource::Fixed(v)),
            RawRates { kind: Some(kind), mean: Some(mean), std: Some(std), fixed: None } => {
                Ok(RateSource::Sampled(RateDistribution { kind, mean, std }))
            }
            _ => Err("rates: give either `fixed = [...]` or all of `kind`, `mean`, `std`".into()),
        }
    }
}

impl From<RateSource> for RawRates {
    fn from(src: RateSource) -> Self {
        match src {
            RateSource::Fixed(v) => RawRates { kind: None, mean: None, std: None, fixed: Some(v) },
            RateSource::Sampled(d) => {
                RawRates { kind: Some(d.kind), mean: Some(d.mean), std: Some(d.std), fixed: None }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Hidden layer widths; empty for logistic regression.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// `(epoch, factor)` step decays.
    #[serde(default)]
    pub milestones: Vec<(u64, f64)>,
    /// Base global batch of the linear scaling rule; defaults to `n_devices * 64`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_global_batch: Option<u64>,
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    pub cr: f64,
    pub delta: f64,
    #[serde(default = "default_ewma")]
    pub ewma_factor: f64,
    #[serde(default)]
    pub gate: GateInput,
}

fn default_ewma() -> f64 {
    0.9
}

/// Affine compute cost `compute_base + compute_per_sample * b` plus a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub compute_base: f64,
    #[serde(default)]
    pub compute_per_sample: f64,
    pub latency: f64,
    pub bandwidth: f64,
}

impl CostModel {
    pub fn link(&self) -> LinkModel {
        LinkModel { latency: self.latency, bandwidth: self.bandwidth }
    }

    pub fn compute_time(&self, batch: usize) -> f64 {
        self.compute_base + self.compute_per_sample * batch as f64
    }
}

/// Complete description of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_devices: usize,
    pub mode: Mode,
    #[serde(default = "default_fixed_batch")]
    pub fixed_batch: usize,
    #[serde(default = "default_b_min")]
    pub b_min: usize,
    #[serde(default = "default_b_max")]
    pub b_max: usize,
    #[serde(default = "default_retention")]
    pub retention: RetentionPolicy,
    /// Seconds of inflow buffered before the first iteration.
    #[serde(default)]
    pub prefill_secs: f64,
    /// Resample sampled rates at every epoch boundary.
    #[serde(default)]
    pub rate_jitter: bool,
    #[serde(default = "default_sample_bytes")]
    pub sample_bytes: u64,
    /// Std of per-epoch Gaussian feature noise; 0 disables augmentation.
    #[serde(default)]
    pub augment_std: f64,
    pub max_epochs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// Extra evaluation cadence in iterations, on top of every epoch end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<u64>,
    pub rates: RateSource,
    pub dataset: DatasetSpec,
    pub partition: PartitionPlan,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    pub cost: CostModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compression: Option<CompressionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<InjectionConfig>,
}

fn default_fixed_batch() -> usize {
    64
}
fn default_b_min() -> usize {
    8
}
fn default_b_max() -> usize {
    1024
}
fn default_retention() -> RetentionPolicy {
    RetentionPolicy::Persistence
}
fn default_sample_bytes() -> u64 {
    DEFAULT_SAMPLE_BYTES
}
fn default_model() -> ModelSpec {
    ModelSpec { hidden: Vec::new() }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_devices == 0 {
            return Err(Error::config("n_devices must be at least 1"));
        }
        match self.mode {
            Mode::DdlFixedBatch if self.fixed_batch == 0 => {
                return Err(Error::config("fixed_batch must be at least 1"))
            }
            Mode::Scadles if self.b_min == 0 || self.b_min > self.b_max => {
                return Err(Error::config(format!("need 1 <= b_min <= b_max, got {} and {}", self.b_min, self.b_max)))
            }
            _ => {}
        }
        match &self.rates {
            RateSource::Sampled(d) => d.validate()?,
            RateSource::Fixed(v) => {
                if v.len() != self.n_devices {
                    return Err(Error::config(format!(
                        "rates.fixed lists {} rates for {} devices",
                        v.len(),
                        self.n_devices
                    )));
                }
                if v.contains(&0) {
                    return Err(Error::config("rates.fixed: a device with rate 0 can never fill a batch"));
                }
            }
        }
        if self.rate_jitter && matches!(self.rates, RateSource::Fixed(_)) {
            return Err(Error::config("rate_jitter requires sampled rates"));
        }
        if !(self.prefill_secs >= 0.0) || !(self.augment_std >= 0.0) {
            return Err(Error::config("prefill_secs and augment_std must be non-negative"));
        }
        if self.sample_bytes == 0 {
            return Err(Error::config("sample_bytes must be positive"));
        }
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every must be at least 1"));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config(format!("target_accuracy must lie in [0, 1], got {t}")));
            }
        }
        self.dataset.validate()?;
        self.partition.validate(self.dataset.n_classes, self.n_devices)?;
        self.architecture().validate()?;
        let o = &self.optimizer;
        if !(o.base_lr > 0.0) || !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) {
            return Err(Error::config("optimizer: need base_lr > 0, momentum in [0, 1), weight_decay >= 0"));
        }
        if o.base_global_batch == Some(0) {
            return Err(Error::config("optimizer.base_global_batch must be at least 1"));
        }
        if !(self.cost.compute_base >= 0.0) || !(self.cost.compute_per_sample >= 0.0) {
            return Err(Error::config("cost: compute terms must be non-negative"));
        }
        self.cost.link().validate()?;
        if let Some(c) = &self.compression {
            if !(c.cr > 0.0 && c.cr <= 1.0) || !(c.delta >= 0.0) || !(c.ewma_factor > 0.0 && c.ewma_factor < 1.0) {
                return Err(Error::config("compression: need cr in (0, 1], delta >= 0, ewma_factor in (0, 1)"));
            }
        }
        if let Some(inj) = &self.injection {
            inj.validate()?;
            if self.n_devices < 2 {
                return Err(Error::config("injection needs at least 2 devices"));
            }
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::mlp(self.dataset.feature_dim, &self.model.hidden, self.dataset.n_classes)
    }

    pub fn base_global_batch(&self) -> u64 {
        self.optimizer.base_global_batch.unwrap_or(self.n_devices as u64 * 64)
    }
}

/// Per-device batch size: fixed in DDL mode, the clamped rate otherwise.
pub fn compute_batch_size(mode: Mode, rate: u32, b_min: usize, b_max: usize, fixed_b: usize) -> usize {
    match mode {
        Mode::DdlFixedBatch => fixed_b,
        Mode::Scadles => (rate as usize).clamp(b_min, b_max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimClock {
    pub now: f64,
    pub iteration: u64,
}

/// One row of the metrics series.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub sim_time_s: f64,
    pub epoch: u64,
    pub global_batch: usize,
    pub lr_used: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    /// Per-device occupancy at the end of the iteration.
    pub buffer_occupancy: Vec<usize>,
    pub buffer_bytes: u64,
    pub floats_sent_cum: u64,
    pub bytes_sent_cum: u64,
    pub cnc_cum: Option<f64>,
    pub injection_bytes: u64,
    pub injection_bytes_cum: u64,
    pub wait_time_s: f64,
    pub compute_time_s: f64,
    pub comm_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: u64,
    pub epochs: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub sim_time_s: f64,
    pub time_to_target_s: Option<f64>,
    pub floats_sent: u64,
    pub bytes_sent: u64,
    pub final_buffer_samples: u64,
    pub final_buffer_bytes: u64,
    pub cnc: Option<f64>,
    pub injection_bytes: u64,
    pub rates: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<IterationMetrics>,
    pub summary: RunSummary,
}

/// A training sample as seen by a device: a train-set index plus the epoch
/// whose augmentation noise it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SampleRef {
    index: usize,
    epoch: u64,
}

/// Mutable state of one simulated run.
pub struct Simulation {
    cfg: SimConfig,
    classifier: Classifier,
    data: Dataset,
    pools: Vec<Vec<usize>>,
    rates: Vec<u32>,
    buffers: Vec<StreamBuffer>,
    replicas: Vec<Vec<f64>>,
    optimizers: Vec<SgdMomentum>,
    gates: Option<Vec<CompressionState>>,
    schedule: StepSchedule,
    volume: VolumeStats,
    clock: SimClock,
    epoch: u64,
    iter_in_epoch: u64,
    epoch_len: u64,
    injection_rng: ChaCha8Rng,
    jitter_rng: ChaCha8Rng,
    augment_seed: u64,
    injection_bytes_cum: u64,
    last_accuracy: Option<f64>,
    best_accuracy: f64,
    time_to_target: Option<f64>,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let master = cfg.seed;
        let n = cfg.n_devices;
        let data = generate_dataset(&cfg.dataset, seed::derive(master, "dataset"))?;
        let pools =
            partition(&data.train.labels, data.n_classes, n, &cfg.partition, seed::derive(master, "partition"))?;
        if let Some(d) = pools.iter().position(Vec::is_empty) {
            return Err(Error::config(format!("device {d} received no training samples")));
        }
        let rates = match &cfg.rates {
            RateSource::Fixed(v) => v.clone(),
            RateSource::Sampled(d) => sample_rates(d, n, seed::derive(master, "rates"))?,
        };
        let mut buffers: Vec<StreamBuffer> = rates.iter().map(|&r| StreamBuffer::new(r, cfg.retention)).collect();
        for b in &mut buffers {
            b.enqueue_arrivals(cfg.prefill_secs)?;
        }
        let classifier = Classifier::new(cfg.architecture())?;
        let init = classifier.init_params(seed::derive(master, "model_init"));
        let dim = init.len();
        let optimizers =
            (0..n).map(|_| SgdMomentum::new(dim, cfg.optimizer.momentum, cfg.optimizer.weight_decay)).collect();
        let gates = cfg
            .compression
            .map(|c| (0..n).map(|_| CompressionState::new(c.cr, c.delta, c.ewma_factor).with_input(c.gate)).collect());
        let schedule = StepSchedule { base_lr: cfg.optimizer.base_lr, milestones: cfg.optimizer.milestones.clone() };
        let mut sim = Simulation {
            classifier,
            pools,
            rates,
            buffers,
            replicas: vec![init; n],
            optimizers,
            gates,
            schedule,
            volume: VolumeStats::default(),
            clock: SimClock::default(),
            epoch: 0,
            iter_in_epoch: 0,
            epoch_len: 0,
            injection_rng: seed::rng(seed::derive(master, "injection")),
            jitter_rng: seed::rng(seed::derive(master, "rate_jitter")),
            augment_seed: seed::derive(master, "augment"),
            injection_bytes_cum: 0,
            last_accuracy: None,
            best_accuracy: 0.0,
            time_to_target: None,
            data,
            cfg,
        };
        sim.epoch_len = sim.compute_epoch_len();
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn rates(&self) -> &[u32] {
        &self.rates
    }

    pub fn buffers(&self) -> &[StreamBuffer] {
        &self.buffers
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn params(&self) -> &[f64] {
        &self.replicas[0]
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn pools(&self) -> &[Vec<usize>] {
        &self.pools
    }

    pub fn volume(&self) -> VolumeStats {
        self.volume
    }

    pub fn gates(&self) -> Option<&[CompressionState]> {
        self.gates.as_deref()
    }

    /// True when every replica holds bit-identical parameters.
    pub fn replicas_identical(&self) -> bool {
        let first = &self.replicas[0];
        self.replicas[1..].iter().all(|r| r.iter().zip(first).all(|(a, b)| a.to_bits() == b.to_bits()))
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.rates
            .iter()
            .map(|&r| compute_batch_size(self.cfg.mode, r, self.cfg.b_min, self.cfg.b_max, self.cfg.fixed_batch))
            .collect()
    }

    fn compute_epoch_len(&self) -> u64 {
        let global: usize = self.batch_sizes().iter().sum();
        (self.data.train.len() as u64).div_ceil(global as u64).max(1)
    }

    pub fn cnc(&self) -> Option<f64> {
        let gates = self.gates.as_ref()?;
        let (c, u) = gates.iter().fold((0, 0), |(c, u), g| (c + g.n_compressed, u + g.n_uncompressed));
        comm::cnc_ratio(c, u).ok()
    }

    pub fn buffer_samples(&self) -> u64 {
        self.buffers.iter().map(|b| b.len() as u64).sum()
    }

    pub fn evaluate(&self) -> Result<f64> {
        self.classifier.evaluate(&self.replicas[0], &self.data.test)
    }

    fn materialize(&self, refs: &[SampleRef]) -> Batch {
        let dim = self.data.train.dim;
        let mut batch = Batch::with_dim(dim);
        let noise = (self.cfg.augment_std > 0.0).then(|| Normal::new(0.0, self.cfg.augment_std).expect("validated"));
        let mut x = vec![0.0; dim];
        for r in refs {
            x.copy_from_slice(self.data.train.row(r.index));
            if let Some(noise) = &noise {
                let mut rng = seed::rng(seed::combine(self.augment_seed, &[r.index as u64, r.epoch]));
                x.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
            batch.push(&x, self.data.train.labels[r.index]);
        }
        batch
    }

    /// Runs one global iteration and returns its metrics row.
    pub fn run_iteration(&mut self) -> Result<IterationMetrics> {
        let n = self.cfg.n_devices;
        let b = self.batch_sizes();

        let wait =
            self.buffers.iter().zip(&b).map(|(buf, &bi)| streaming_wait(buf.len(), bi, buf.rate())).fold(0.0, f64::max);
        for buf in &mut self.buffers {
            buf.enqueue_arrivals(wait)?;
        }

        let mut batches: Vec<Vec<SampleRef>> = Vec::with_capacity(n);
        for (d, buf) in self.buffers.iter_mut().enumerate() {
            let ids = buf.draw_batch(b[d])?;
            let pool = &self.pools[d];
            batches.push(
                ids.into_iter()
                    .map(|id| SampleRef { index: pool[(id % pool.len() as u64) as usize], epoch: self.epoch })
                    .collect(),
            );
        }

        let mut injection_bytes = 0;
        if let Some(inj) = &self.cfg.injection {
            let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
            let plan = injection_plan(n, inj, &sizes, &mut self.injection_rng)?;
            let (augmented, bytes) = datagen::inject(&batches, &plan, self.cfg.sample_bytes)?;
            batches = augmented;
            injection_bytes = bytes;
        }
        self.injection_bytes_cum += injection_bytes;

        let dim = self.classifier.param_count();
        let mut grads = Vec::with_capacity(n);
        let mut losses = Vec::with_capacity(n);
        let mut max_payload = 0u64;
        for d in 0..n {
            let batch = self.materialize(&batches[d]);
            let (loss, g) = self.classifier.loss_and_grad(&self.replicas[d], &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration: self.clock.iteration + 1, loss });
            }
            losses.push(loss);
            let grad = match self.gates.as_mut() {
                Some(gates) => {
                    let gate = &mut gates[d];
                    let (decision, _) = compression_gate(&g, gate);
                    account_volume(decision.is_compressed(), dim, gate.cr, &mut self.volume);
                    decision.into_gradient()
                }
                None => {
                    account_volume(false, dim, 1.0, &mut self.volume);
                    GradientVector::Dense(g)
                }
            };
            max_payload = max_payload.max(grad.wire_bytes());
            grads.push(grad);
        }

        let weights = match self.cfg.mode {
            Mode::Scadles => weights_from_rates(&self.rates)?,
            Mode::DdlFixedBatch => AggregationWeights::uniform(n)?,
        };
        let aggregate = weighted_aggregate(&grads, &weights)?;
        let train_loss: f64 = losses.iter().zip(weights.as_slice()).map(|(l, r)| l * r).sum();

        let scheduled = self.schedule.lr_at(self.epoch);
        let lr = match self.cfg.mode {
            Mode::Scadles => {
                let sum_rates: f64 = self.rates.iter().map(|&r| f64::from(r)).sum();
                scale_lr(scheduled, sum_rates, self.cfg.base_global_batch())
            }
            Mode::DdlFixedBatch => scheduled,
        };
        for (params, opt) in self.replicas.iter_mut().zip(&mut self.optimizers) {
            opt.step(params, &aggregate, lr);
        }
        debug_assert!(self.replicas_identical());
        if self.replicas[0].iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { iteration: self.clock.iteration + 1, loss: f64::NAN });
        }

        let compute = b.iter().map(|&bi| self.cfg.cost.compute_time(bi)).fold(0.0, f64::max);
        let comm = comm_time(max_payload, &self.cfg.cost.link(), n);
        let busy = compute + comm;
        self.clock.now += wait + busy;
        self.clock.iteration += 1;
        for buf in &mut self.buffers {
            buf.enqueue_arrivals(busy)?;
            buf.apply_retention();
        }

        let global_batch: usize = b.iter().sum();
        let epoch_of_row = self.epoch;
        self.iter_in_epoch += 1;
        let epoch_done = self.iter_in_epoch >= self.epoch_len;
        let cadence = self.cfg.eval_every.is_some_and(|k| self.clock.iteration.is_multiple_of(k));
        let test_accuracy = if epoch_done || cadence { Some(self.record_accuracy()?) } else { None };
        if epoch_done {
            self.epoch += 1;
            self.iter_in_epoch = 0;
            self.start_epoch()?;
        }

        let occupancy: Vec<usize> = self.buffers.iter().map(StreamBuffer::len).collect();
        let buffer_samples: u64 = occupancy.iter().map(|&o| o as u64).sum();
        Ok(IterationMetrics {
            iteration: self.clock.iteration,
            sim_time_s: self.clock.now,
            epoch: epoch_of_row,
            global_batch,
            lr_used: lr,
            train_loss,
            test_accuracy,
            buffer_occupancy: occupancy,
            buffer_bytes: buffer_samples * self.cfg.sample_bytes,
            floats_sent_cum: self.volume.floats_sent,
            bytes_sent_cum: self.volume.bytes_sent,
            cnc_cum: self.cnc(),
            injection_bytes,
            injection_bytes_cum: self.injection_bytes_cum,
            wait_time_s: wait,
            compute_time_s: compute,
            comm_time_s: comm,
        })
    }

    fn record_accuracy(&mut self) -> Result<f64> {
        let acc = self.evaluate()?;
        self.last_accuracy = Some(acc);
        self.best_accuracy = self.best_accuracy.max(acc);
        if let Some(target) = self.cfg.target_accuracy {
            if acc >= target && self.time_to_target.is_none() {
                self.time_to_target = Some(self.clock.now);
            }
        }
        Ok(acc)
    }

    fn start_epoch(&mut self) -> Result<()> {
        if self.cfg.rate_jitter {
            if let RateSource::Sampled(dist) = &self.cfg.rates {
                let s: u64 = self.jitter_rng.random();
                self.rates = sample_rates(dist, self.cfg.n_devices, s)?;
                for (buf, &r) in self.buffers.iter_mut().zip(&self.rates) {
                    buf.set_rate(r);
                }
            }
        }
        self.epoch_len = self.compute_epoch_len();
        Ok(())
    }

    fn finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs
            || self.cfg.max_iterations.is_some_and(|m| self.clock.iteration >= m)
            || self.time_to_target.is_some()
    }

    /// Runs to completion, handing every row to `sink` as it is produced.
    pub fn run<F>(&mut self, mut sink: F) -> Result<RunSummary>
    where
        F: FnMut(&IterationMetrics) -> Result<()>,
    {
        while !self.finished() {
            let mut row = self.run_iteration()?;
            if self.finished() && row.test_accuracy.is_none() {
                row.test_accuracy = Some(self.record_accuracy()?);
            }
            sink(&row)?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        let buffer_samples = self.buffer_samples();
        RunSummary {
            iterations: self.clock.iteration,
            epochs: self.epoch,
            final_accuracy: self.last_accuracy.unwrap_or(0.0),
            best_accuracy: self.best_accuracy,
            sim_time_s: self.clock.now,
            time_to_target_s: self.time_to_target,
            floats_sent: self.volume.floats_sent,
            bytes_sent: self.volume.bytes_sent,
            final_buffer_samples: buffer_samples,
            final_buffer_bytes: buffer_samples * self.cfg.sample_bytes,
            cnc: self.cnc(),
            injection_bytes: self.injection_bytes_cum,
            rates: self.rates.clone(),
        }
    }
}

/// Runs a full experiment and collects every metrics row.
pub fn run_experiment(cfg: &SimConfig) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg.clone())?;
    let mut metrics = Vec::new();
    let summary = sim.run(|row| {
        metrics.push(row.clone());
        Ok(())
    })?;
    Ok(RunOutput { metrics, summary })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::datagen::PartitionMode;

    pub(crate) fn small_config(mode: Mode, rates: Vec<u32>) -> SimConfig {
        SimConfig {
            seed: 1,
            n_devices: rates.len(),
            mode,
            fixed_batch: 64,
            b_min: 8,
            b_max: 1024,
            retention: RetentionPolicy::Persistence,
            prefill_secs: 0.0,
            rate_jitter: false,
            sample_bytes: DEFAULT_SAMPLE_BYTES,
            augment_std: 0.0,
            max_epochs: 2,
            max_iterations: None,
            target_accuracy: None,
            eval_every: None,
            rates: RateSource::Fixed(rates),
            dataset: DatasetSpec {
                n_classes: 4,
                feature_dim: 5,
                samples_per_class: 50,
                cluster_spread: 0.5,
                mean_scale: 1.0,
            },
            partition: PartitionPlan { mode: PartitionMode::Iid, labels_per_device: 0 },
            model: ModelSpec { hidden: vec![6] },
            optimizer: OptimizerSpec {
                base_lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                milestones: vec![],
                base_global_batch: None,
            },
            cost: CostModel { compute_base: 1.0, compute_per_sample: 0.001, latency: 0.01, bandwidth: 1e7 },
            compression: None,
            injection: None,
        }
    }

    #[test]
    fn batch_size_examples() {
        assert_eq!(compute_batch_size(Mode::Scadles, 38, 8, 1024, 64), 38);
        assert_eq!(compute_batch_size(Mode::Scadles, 4, 8, 1024, 64), 8);
        assert_eq!(compute_batch_size(Mode::Scadles, 5000, 8, 1024, 64), 1024);
        assert_eq!(compute_batch_size(Mode::DdlFixedBatch, 3, 8, 1024, 64), 64);
    }

    #[test]
    fn straggler_sets_first_wait() {
        let cfg = small_config(Mode::DdlFixedBatch, vec![27, 300, 300, 300]);
        let mut sim = Simulation::new(cfg).unwrap();
        let row = sim.run_iteration().unwrap();
        assert!((row.wait_time_s - 64.0 / 27.0).abs() < 1e-9);
    }

    #[test]
    fn ddl_wait_converges_to_straggler_model() {
        let mut cfg = small_config(Mode::DdlFixedBatch, vec![20, 300]);
        cfg.cost = CostModel { compute_base: 1.0, compute_per_sample: 0.0, latency: 0.0, bandwidth: f64::INFINITY };
        cfg.max_iterations = Some(30);
        let mut sim = Simulation::new(cfg).unwrap();
        let mut last = 0.0;
        for _ in 0..30 {
            last = sim.run_iteration().unwrap().wait_time_s;
        }
        // b / S_min - t = 64 / 20 - 1.
        assert!((last - 2.2).abs() < 1.0 / 20.0 + 1e-9, "{last}");
    }

    #[test]
    fn scadles_no_wait_after_first_iteration() {
        let cfg = small_config(Mode::Scadles, vec![27, 300, 90, 41]);
        let mut sim = Simulation::new(cfg).unwrap();
        let first = sim.run_iteration().unwrap();
        assert!((first.wait_time_s - 1.0).abs() < 1e-12);
        for _ in 0..20 {
            assert_eq!(sim.run_iteration().unwrap().wait_time_s, 0.0);
        }
    }

    #[test]
    fn equal_rates_scadles_matches_ddl() {
        let mut a = small_config(Mode::Scadles, vec![32, 32]);
        a.optimizer.base_global_batch = Some(64);
        let mut b = small_config(Mode::DdlFixedBatch, vec![32, 32]);
        b.fixed_batch = 32;
        let ra = run_experiment(&a).unwrap();
        let rb = run_experiment(&b).unwrap();
        assert_eq!(ra.metrics, rb.metrics);
    }

    #[test]
    fn replicas_stay_identical_and_clock_advances() {
        let mut cfg = small_config(Mode::Scadles, vec![10, 40, 70]);
        cfg.compression = Some(CompressionConfig { cr: 0.2, delta: 0.3, ewma_factor: 0.9, gate: GateInput::Smoothed });
        cfg.injection = Some(InjectionConfig { alpha: 0.5, beta: 0.5 });
        let mut sim = Simulation::new(cfg).unwrap();
        let mut prev = 0.0;
        for _ in 0..25 {
            let row = sim.run_iteration().unwrap();
            assert!(sim.replicas_identical());
            assert!(row.sim_time_s > prev);
            prev = row.sim_time_s;
            assert_eq!(row.global_batch, 10 + 40 + 70);
        }
    }

    #[test]
    fn persistence_trajectory_matches_closed_form() {
        // t = 1 s (no comm cost), b = S clamp below t*S via ddl fixed batch.
        let mut cfg = small_config(Mode::DdlFixedBatch, vec![50, 80]);
        cfg.fixed_batch = 30;
        cfg.prefill_secs = 1.0;
        cfg.cost = CostModel { compute_base: 1.0, compute_per_sample: 0.0, latency: 0.0, bandwidth: f64::INFINITY };
        let mut sim = Simulation::new(cfg).unwrap();
        for t in 1..=40u64 {
            let row = sim.run_iteration().unwrap();
            assert_eq!(row.wait_time_s, 0.0);
            assert_eq!(row.buffer_occupancy, vec![(50 - 30) * t as usize + 50, (80 - 30) * t as usize + 80]);
        }
    }

    #[test]
    fn truncation_holds_at_most_rate() {
        let mut cfg = small_config(Mode::DdlFixedBatch, vec![50, 80]);
        cfg.fixed_batch = 30;
        cfg.retention = RetentionPolicy::Truncation;
        let mut sim = Simulation::new(cfg).unwrap();
        for _ in 0..30 {
            let row = sim.run_iteration().unwrap();
            assert!(row.buffer_occupancy[0] <= 50 && row.buffer_occupancy[1] <= 80);
        }
    }

    #[test]
    fn epochs_and_evaluation() {
        let cfg = small_config(Mode::DdlFixedBatch, vec![100, 100]);
        // 160 train samples, global batch 128 -> 2 iterations per epoch.
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.metrics.len(), 4);
        assert_eq!(out.summary.epochs, 2);
        let evals: Vec<bool> = out.metrics.iter().map(|m| m.test_accuracy.is_some()).collect();
        assert_eq!(evals, vec![false, true, false, true]);
    }

    #[test]
    fn target_accuracy_stops_early() {
        let mut cfg = small_config(Mode::Scadles, vec![40, 40, 40]);
        cfg.max_epochs = 200;
        cfg.target_accuracy = Some(0.5);
        let out = run_experiment(&cfg).unwrap();
        let t = out.summary.time_to_target_s.expect("target reached");
        assert_eq!(t, out.summary.sim_time_s);
        assert!(out.summary.final_accuracy >= 0.5);
        assert!(out.summary.epochs < 200);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small_config(Mode::DdlFixedBatch, vec![100, 100]);
        cfg.model.hidden = vec![];
        cfg.optimizer.base_lr = 1e308;
        cfg.max_epochs = 50;
        match run_experiment(&cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.summary)),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_config(Mode::Scadles, vec![10, 0]);
        assert!(Simulation::new(cfg.clone()).is_err());
        cfg.rates = RateSource::Fixed(vec![10]);
        assert!(Simulation::new(cfg.clone()).is_err());
        cfg.rates = RateSource::Fixed(vec![10, 10]);
        cfg.b_min = 100;
        cfg.b_max = 10;
        assert!(Simulation::new(cfg).is_err());
    }

    #[test]
    fn rate_jitter_resamples_each_epoch() {
        let mut cfg = small_config(Mode::Scadles, vec![]);
        cfg.n_devices = 4;
        cfg.rates = RateSource::Sampled(RateDistribution::uniform(60.0, 20.0));
        cfg.rate_jitter = true;
        cfg.max_epochs = 3;
        let mut sim = Simulation::new(cfg).unwrap();
        let first = sim.rates().to_vec();
        sim.run(|_| Ok(())).unwrap();
        assert_ne!(sim.rates(), &first[..]);
    }
}
