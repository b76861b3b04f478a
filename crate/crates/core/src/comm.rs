//! Gradient exchange: rate-weighted aggregation, Top-k sparsification, the
//! EWMA-gated adaptive compression rule, volume accounting and a ring
//! allreduce cost model.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ceil_count;
use crate::error::{Error, Result};

/// Bytes per transmitted gradient value (single precision).
pub const VALUE_BYTES: u64 = 4;
/// Bytes per transmitted sparse index.
pub const INDEX_BYTES: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum GradientVector {
    Dense(Vec<f64>),
    /// Strictly increasing `indices`, all `< dim`.
    Sparse {
        dim: usize,
        indices: Vec<u32>,
        values: Vec<f64>,
    },
}

impl GradientVector {
    pub fn sparse(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: indices.len(), got: values.len() });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) || indices.last().is_some_and(|&i| i as usize >= dim) {
            return Err(Error::Format("sparse indices must be strictly increasing and below dim".into()));
        }
        Ok(GradientVector::Sparse { dim, indices, values })
    }

    pub fn dim(&self) -> usize {
        match self {
            GradientVector::Dense(v) => v.len(),
            GradientVector::Sparse { dim, .. } => *dim,
        }
    }

    /// Number of transmitted values.
    pub fn nnz_sent(&self) -> usize {
        match self {
            GradientVector::Dense(v) => v.len(),
            GradientVector::Sparse { values, .. } => values.len(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self, GradientVector::Sparse { .. })
    }

    pub fn densify(&self) -> Vec<f64> {
        match self {
            GradientVector::Dense(v) => v.clone(),
            GradientVector::Sparse { dim, indices, values } => {
                let mut out = vec![0.0; *dim];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out
            }
        }
    }

    /// Squared L2 norm, summed in index order.
    pub fn squared_norm(&self) -> f64 {
        match self {
            GradientVector::Dense(v) => v.iter().map(|x| x * x).sum(),
            GradientVector::Sparse { values, .. } => values.iter().map(|x| x * x).sum(),
        }
    }

    /// Payload size on the wire.
    pub fn wire_bytes(&self) -> u64 {
        match self {
            GradientVector::Dense(v) => v.len() as u64 * VALUE_BYTES,
            GradientVector::Sparse { values, .. } => values.len() as u64 * (VALUE_BYTES + INDEX_BYTES),
        }
    }
}

/// Per-device aggregation weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("no devices to weight"));
        }
        Ok(AggregationWeights(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `r_j = S_j / sum(S)`.
pub fn weights_from_rates(rates: &[u32]) -> Result<AggregationWeights> {
    if rates.is_empty() {
        return Err(Error::config("empty rate list"));
    }
    if rates.contains(&0) {
        return Err(Error::config("streaming rates must be at least 1"));
    }
    let total: f64 = rates.iter().map(|&r| f64::from(r)).sum();
    Ok(AggregationWeights(rates.iter().map(|&r| f64::from(r) / total).collect()))
}

/// `sum_j r_j * g_j`, folded in ascending device order.
pub fn weighted_aggregate(grads: &[GradientVector], weights: &AggregationWeights) -> Result<Vec<f64>> {
    if grads.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: weights.len(), got: grads.len() });
    }
    let dim = grads.first().map_or(0, GradientVector::dim);
    let mut out = vec![0.0; dim];
    for (g, &r) in grads.iter().zip(weights.as_slice()) {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: g.dim() });
        }
        match g {
            GradientVector::Dense(v) => {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += r * x;
                }
            }
            GradientVector::Sparse { indices, values, .. } => {
                // Skipped coordinates receive `r * 0.0`, which leaves the sum unchanged.
                for (&i, x) in indices.iter().zip(values) {
                    out[i as usize] += r * x;
                }
            }
        }
    }
    Ok(out)
}

/// Number of entries Top-k keeps: `max(1, ceil(cr * dim))`, capped at `dim`.
pub fn topk_count(dim: usize, cr: f64) -> usize {
    ceil_count(cr * dim as f64).max(1).min(dim.max(1))
}

/// Orders by descending magnitude, then ascending index.
fn magnitude_order(g: &[f64], a: usize, b: usize) -> Ordering {
    g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b))
}

/// Keeps the `topk_count(dim, cr)` largest-magnitude entries. Ties go to the
/// lower index; kept values are unmodified.
pub fn topk_sparsify(g: &[f64], cr: f64) -> GradientVector {
    assert!(cr > 0.0 && cr <= 1.0, "compression ratio must lie in (0, 1]");
    let dim = g.len();
    if dim == 0 {
        return GradientVector::Sparse { dim, indices: Vec::new(), values: Vec::new() };
    }
    let m = topk_count(dim, cr);
    let mut order: Vec<usize> = (0..dim).collect();
    if m < dim {
        order.select_nth_unstable_by(m - 1, |&a, &b| magnitude_order(g, a, b));
        order.truncate(m);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| g[i]).collect();
    GradientVector::Sparse { dim, indices: order.into_iter().map(|i| i as u32).collect(), values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// Compare EWMA-smoothed squared norms.
    #[default]
    Smoothed,
    /// Compare this iteration's raw squared norms (EWMAs are still tracked).
    Raw,
}

/// Adaptive compression gate for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionState {
    pub cr: f64,
    pub delta: f64,
    pub ewma_factor: f64,
    pub input: GateInput,
    pub ewma_full: f64,
    pub ewma_topk: f64,
    pub initialized: bool,
    pub n_compressed: u64,
    pub n_uncompressed: u64,
}

impl CompressionState {
    pub fn new(cr: f64, delta: f64, ewma_factor: f64) -> Self {
        assert!(cr > 0.0 && cr <= 1.0, "compression ratio must lie in (0, 1]");
        assert!(delta >= 0.0, "threshold must be non-negative");
        assert!(ewma_factor > 0.0 && ewma_factor < 1.0, "EWMA factor must lie in (0, 1)");
        CompressionState {
            cr,
            delta,
            ewma_factor,
            input: GateInput::Smoothed,
            ewma_full: 0.0,
            ewma_topk: 0.0,
            initialized: false,
            n_compressed: 0,
            n_uncompressed: 0,
        }
    }

    pub fn with_input(mut self, input: GateInput) -> Self {
        self.input = input;
        self
    }

    pub fn decisions(&self) -> u64 {
        self.n_compressed + self.n_uncompressed
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateDecision {
    Compressed(GradientVector),
    Uncompressed(GradientVector),
}

impl GateDecision {
    pub fn is_compressed(&self) -> bool {
        matches!(self, GateDecision::Compressed(_))
    }

    pub fn gradient(&self) -> &GradientVector {
        match self {
            GateDecision::Compressed(g) | GateDecision::Uncompressed(g) => g,
        }
    }

    pub fn into_gradient(self) -> GradientVector {
        match self {
            GateDecision::Compressed(g) | GateDecision::Uncompressed(g) => g,
        }
    }
}

/// Relative squared-norm loss `(full - topk) / full`, clamped to `[0, 1]`.
/// A zero norm loses nothing and yields 0.
pub fn gate_ratio(full: f64, topk: f64) -> f64 {
    if full <= 0.0 {
        0.0
    } else {
        ((full - topk) / full).clamp(0.0, 1.0)
    }
}

/// Updates the EWMAs with this gradient and decides whether to send its
/// Top-k form. Returns the decision and the gate ratio that produced it.
pub fn compression_gate(g: &[f64], state: &mut CompressionState) -> (GateDecision, f64) {
    let sparse = topk_sparsify(g, state.cr);
    let s_full: f64 = g.iter().map(|x| x * x).sum();
    let s_topk = sparse.squared_norm();

    if state.initialized {
        let f = state.ewma_factor;
        state.ewma_full = f * state.ewma_full + (1.0 - f) * s_full;
        state.ewma_topk = f * state.ewma_topk + (1.0 - f) * s_topk;
    } else {
        state.ewma_full = s_full;
        state.ewma_topk = s_topk;
        state.initialized = true;
    }

    let rho = match state.input {
        GateInput::Smoothed => gate_ratio(state.ewma_full, state.ewma_topk),
        GateInput::Raw => gate_ratio(s_full, s_topk),
    };
    if rho <= state.delta {
        state.n_compressed += 1;
        (GateDecision::Compressed(sparse), rho)
    } else {
        state.n_uncompressed += 1;
        (GateDecision::Uncompressed(GradientVector::Dense(g.to_vec())), rho)
    }
}

/// `n_compressed / (n_compressed + n_uncompressed)`.
pub fn cnc_ratio(n_compressed: u64, n_uncompressed: u64) -> Result<f64> {
    let total = n_compressed + n_uncompressed;
    if total == 0 {
        return Err(Error::NoDecisions);
    }
    Ok(n_compressed as f64 / total as f64)
}

impl CompressionState {
    pub fn cnc_ratio(&self) -> Result<f64> {
        cnc_ratio(self.n_compressed, self.n_uncompressed)
    }
}

/// Cumulative communication volume.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeStats {
    /// Single-precision values sent (sparse indices excluded).
    pub floats_sent: u64,
    /// Wire bytes: 4 per value, plus 4 per index for sparse payloads.
    pub bytes_sent: u64,
}

/// Adds one device-iteration's payload to `stats`.
pub fn account_volume(compressed: bool, dim: usize, cr: f64, stats: &mut VolumeStats) {
    if compressed {
        let m = topk_count(dim, cr) as u64;
        stats.floats_sent += m;
        stats.bytes_sent += m * (VALUE_BYTES + INDEX_BYTES);
    } else {
        stats.floats_sent += dim as u64;
        stats.bytes_sent += dim as u64 * VALUE_BYTES;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Seconds per collective.
    pub latency: f64,
    /// Bytes/second; may be infinite.
    pub bandwidth: f64,
}

impl LinkModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.latency >= 0.0) || !self.latency.is_finite() {
            return Err(Error::config(format!("link latency must be non-negative, got {}", self.latency)));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::config(format!("link bandwidth must be positive, got {}", self.bandwidth)));
        }
        Ok(())
    }
}

/// Ring-allreduce shaped cost: `latency + 2(n-1)/n * bytes / bandwidth`.
pub fn comm_time(bytes: u64, link: &LinkModel, n_devices: usize) -> f64 {
    let n = n_devices.max(1) as f64;
    link.latency + 2.0 * (n - 1.0) / n * bytes as f64 / link.bandwidth
}
