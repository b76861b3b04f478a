//! Small fully-connected classifiers with exact gradients, momentum SGD,
//! step-decay schedules and the linear learning-rate scaling rule.
//!
//! Parameters live in one flat `f64` vector. Layers appear in declaration
//! order; within a layer the weight matrix (`out x in`, row-major) precedes
//! the bias vector.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Layer widths of a classifier. An empty `hidden` list is multinomial
/// logistic regression; hidden layers use `tanh`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub n_classes: usize,
}

impl Architecture {
    pub fn logistic(input_dim: usize, n_classes: usize) -> Self {
        Architecture { input_dim, hidden: Vec::new(), n_classes }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize) -> Self {
        Architecture { input_dim, hidden: hidden.to_vec(), n_classes }
    }

    /// `(in, out)` for every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend(&self.hidden);
        widths.push(self.n_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_classes < 2 || self.hidden.contains(&0) {
            return Err(Error::config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Structured view of a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn unflatten(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::DimensionMismatch { expected: arch.param_count(), got: flat.len() });
        }
        let mut off = 0;
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(i, o)| {
                let weights = flat[off..off + i * o].to_vec();
                off += i * o;
                let bias = flat[off..off + o].to_vec();
                off += o;
                Layer { weights, bias }
            })
            .collect();
        Ok(ModelParams { arch: arch.clone(), layers })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect()
    }
}

/// A labeled mini-batch with row-major features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch { expected: dim * labels.len(), got: features.len() });
        }
        Ok(Batch { dim, features, labels })
    }

    pub fn with_dim(dim: usize) -> Self {
        Batch { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }
}

/// Stateless classifier evaluated against externally held flat parameters.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: Architecture,
    dims: Vec<(usize, usize)>,
    offsets: Vec<usize>,
}

impl Classifier {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(i, o) in &dims {
            offsets.push(off);
            off += i * o + o;
        }
        Ok(Classifier { arch, dims, offsets })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        let mut params = vec![0.0; self.param_count()];
        for (&(i, o), &off) in self.dims.iter().zip(&self.offsets) {
            let limit = (6.0 / (i + o) as f64).sqrt();
            for w in &mut params[off..off + i * o] {
                *w = rng.random_range(-limit..limit);
            }
        }
        params
    }

    fn check(&self, params: &[f64], batch: &Batch) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch { expected: self.param_count(), got: params.len() });
        }
        if batch.dim != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, got: batch.dim });
        }
        if batch.is_empty() {
            return Err(Error::Format("empty batch".into()));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= self.arch.n_classes) {
            return Err(Error::DimensionMismatch { expected: self.arch.n_classes, got: bad });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn activations(&self, params: &[f64], batch: &Batch) -> Vec<Vec<f64>> {
        let n = batch.len();
        let last = self.dims.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.dims.len() + 1);
        acts.push(batch.features.clone());
        for (l, (&(din, dout), &off)) in self.dims.iter().zip(&self.offsets).enumerate() {
            let w = &params[off..off + din * dout];
            let b = &params[off + din * dout..off + din * dout + dout];
            let input = &acts[l];
            let mut out = vec![0.0; n * dout];
            for r in 0..n {
                let x = &input[r * din..(r + 1) * din];
                for j in 0..dout {
                    let row = &w[j * din..(j + 1) * din];
                    let z = b[j] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                    out[r * dout + j] = if l == last { z } else { z.tanh() };
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Row-wise softmax probabilities and mean cross-entropy of the logits.
    fn softmax_loss(logits: &[f64], labels: &[usize], k: usize) -> (Vec<f64>, f64) {
        let mut probs = vec![0.0; logits.len()];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z = &logits[r * k..(r + 1) * k];
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let log_norm = m + sum.ln();
            for j in 0..k {
                probs[r * k + j] = (z[j] - log_norm).exp();
            }
            loss += log_norm - z[y];
        }
        (probs, loss / labels.len() as f64)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn forward_loss(&self, params: &[f64], batch: &Batch) -> Result<f64> {
        self.check(params, batch)?;
        let acts = self.activations(params, batch);
        let (_, loss) = Self::softmax_loss(acts.last().unwrap(), &batch.labels, self.arch.n_classes);
        Ok(loss)
    }

    /// Mean loss and its exact gradient, flattened in canonical order.
    pub fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.check(params, batch)?;
        let n = batch.len();
        let k = self.arch.n_classes;
        let acts = self.activations(params, batch);
        let (probs, loss) = Self::softmax_loss(acts.last().unwrap(), &batch.labels, k);

        let mut delta = probs;
        for (r, &y) in batch.labels.iter().enumerate() {
            delta[r * k + y] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        delta.iter_mut().for_each(|d| *d *= inv_n);

        let mut grad = vec![0.0; self.param_count()];
        for l in (0..self.dims.len()).rev() {
            let (din, dout) = self.dims[l];
            let off = self.offsets[l];
            let input = &acts[l];
            {
                let (gw, gb) = grad[off..off + din * dout + dout].split_at_mut(din * dout);
                for r in 0..n {
                    let x = &input[r * din..(r + 1) * din];
                    for j in 0..dout {
                        let d = delta[r * dout + j];
                        if d == 0.0 {
                            continue;
                        }
                        gb[j] += d;
                        for (g, xi) in gw[j * din..(j + 1) * din].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            if l > 0 {
                let w = &params[off..off + din * dout];
                let mut prev = vec![0.0; n * din];
                for r in 0..n {
                    for j in 0..dout {
                        let d = delta[r * dout + j];
                        if d == 0.0 {
                            continue;
                        }
                        for (p, wi) in prev[r * din..(r + 1) * din].iter_mut().zip(&w[j * din..(j + 1) * din]) {
                            *p += d * wi;
                        }
                    }
                    for (p, a) in prev[r * din..(r + 1) * din].iter_mut().zip(&input[r * din..(r + 1) * din]) {
                        *p *= 1.0 - a * a;
                    }
                }
                delta = prev;
            }
        }
        Ok((loss, grad))
    }

    pub fn backward(&self, params: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        self.loss_and_grad(params, batch).map(|(_, g)| g)
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, params: &[f64], batch: &Batch) -> Result<Vec<usize>> {
        self.check(params, batch)?;
        let k = self.arch.n_classes;
        let acts = self.activations(params, batch);
        let logits = acts.last().unwrap();
        Ok((0..batch.len()).map(|r| argmax(&logits[r * k..(r + 1) * k])).collect())
    }

    /// Top-1 accuracy on `test`.
    pub fn evaluate(&self, params: &[f64], test: &Batch) -> Result<f64> {
        let pred = self.predict(params, test)?;
        let correct = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / test.len() as f64)
    }
}

/// Index of the first maximal entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Piecewise-constant learning-rate schedule: the base rate multiplied by
/// the factor of every milestone epoch already reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub base_lr: f64,
    #[serde(default)]
    pub milestones: Vec<(u64, f64)>,
}

impl StepSchedule {
    pub fn constant(base_lr: f64) -> Self {
        StepSchedule { base_lr, milestones: Vec::new() }
    }

    pub fn lr_at(&self, epoch: u64) -> f64 {
        self.milestones.iter().filter(|&&(e, _)| e <= epoch).fold(self.base_lr, |lr, &(_, f)| lr * f)
    }
}

/// Momentum SGD with coupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    buffer: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(n_params: usize, momentum: f64, weight_decay: f64) -> Self {
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        SgdMomentum { momentum, weight_decay, buffer: vec![0.0; n_params] }
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    /// `buf <- m*buf + (g + wd*w)`, then `w <- w - lr*buf`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.buffer.len());
        for ((w, &g), b) in params.iter_mut().zip(grad).zip(self.buffer.iter_mut()) {
            *b = self.momentum * *b + (g + self.weight_decay * *w);
            *w -= lr * *b;
        }
    }
}

/// Linear scaling rule: the learning rate grows in proportion to the global
/// batch (here the sum of streaming rates) relative to a base global batch.
pub fn scale_lr(base_lr: f64, sum_rates: f64, base_global_batch: u64) -> f64 {
    assert!(base_global_batch >= 1, "base global batch must be at least 1");
    base_lr * sum_rates / base_global_batch as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    arch: Architecture,
    param_count: usize,
}

const CHECKPOINT_FORMAT: &str = "streamsgd-params-v1";

/// Writes a one-line JSON header followed by little-endian `f64` parameters.
pub fn save_checkpoint(path: &Path, arch: &Architecture, params: &[f64]) -> Result<()> {
    if params.len() != arch.param_count() {
        return Err(Error::DimensionMismatch { expected: arch.param_count(), got: params.len() });
    }
    let header = CheckpointHeader { format: CHECKPOINT_FORMAT.into(), arch: arch.clone(), param_count: params.len() };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Architecture, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", header.format)));
    }
    if header.param_count != header.arch.param_count() {
        return Err(Error::DimensionMismatch { expected: header.arch.param_count(), got: header.param_count });
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.param_count * 8 {
        return Err(Error::Format(format!(
            "checkpoint body holds {} bytes, expected {}",
            bytes.len(),
            header.param_count * 8
        )));
    }
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header.arch, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_batch(dim: usize, k: usize, n: usize, seed: u64) -> Batch {
        let mut rng = seed::rng(seed);
        let features = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        Batch::new(dim, features, labels).unwrap()
    }

    /// Independent scalar-loop loss for logistic regression and one-hidden-layer MLPs.
    fn scalar_loss(arch: &Architecture, params: &[f64], batch: &Batch) -> f64 {
        let p = ModelParams::unflatten(arch, params).unwrap();
        let mut total = 0.0;
        for r in 0..batch.len() {
            let mut a: Vec<f64> = batch.row(r).to_vec();
            for (li, layer) in p.layers.iter().enumerate() {
                let dout = layer.bias.len();
                let din = a.len();
                let mut z = vec![0.0; dout];
                for j in 0..dout {
                    let mut s = layer.bias[j];
                    for i in 0..din {
                        s += layer.weights[j * din + i] * a[i];
                    }
                    z[j] = if li + 1 == p.layers.len() { s } else { s.tanh() };
                }
                a = z;
            }
            let m = a.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + a.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - a[batch.labels[r]];
        }
        total / batch.len() as f64
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let arch = Architecture::logistic(3, 7);
        let c = Classifier::new(arch).unwrap();
        let params = vec![0.0; c.param_count()];
        let batch = random_batch(3, 7, 20, 1);
        assert!((c.forward_loss(&params, &batch).unwrap() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separating_params_drive_loss_to_zero() {
        let arch = Architecture::logistic(2, 2);
        let c = Classifier::new(arch).unwrap();
        // w0 = [s, 0], w1 = [-s, 0]; data at x = +-1.
        let s = 50.0;
        let params = vec![s, 0.0, -s, 0.0, 0.0, 0.0];
        let batch = Batch::new(2, vec![1.0, 0.0, -1.0, 0.0], vec![0, 1]).unwrap();
        assert!(c.forward_loss(&params, &batch).unwrap() < 1e-40);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for (seed, arch) in [
            (1, Architecture::logistic(5, 4)),
            (2, Architecture::mlp(6, &[7], 3)),
            (3, Architecture::mlp(4, &[5, 3], 6)),
        ] {
            let c = Classifier::new(arch.clone()).unwrap();
            let mut params = c.init_params(seed);
            let mut rng = seed::rng(seed + 100);
            params.iter_mut().for_each(|p| *p += 0.1 * rng.random_range(-1.0..1.0));
            let batch = random_batch(arch.input_dim, arch.n_classes, 17, seed);
            let got = c.forward_loss(&params, &batch).unwrap();
            let want = scalar_loss(&arch, &params, &batch);
            assert!((got - want).abs() <= 1e-12 * want.abs(), "{got} vs {want}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-5;
        for (seed, arch) in [
            (10, Architecture::logistic(5, 4)),
            (11, Architecture::mlp(6, &[8], 3)),
            (12, Architecture::mlp(4, &[5, 6], 5)),
        ] {
            let c = Classifier::new(arch.clone()).unwrap();
            let params = c.init_params(seed);
            let batch = random_batch(arch.input_dim, arch.n_classes, 9, seed);
            let grad = c.backward(&params, &batch).unwrap();
            for i in 0..params.len() {
                let mut p = params.clone();
                p[i] += h;
                let up = c.forward_loss(&p, &batch).unwrap();
                p[i] -= 2.0 * h;
                let down = c.forward_loss(&p, &batch).unwrap();
                let fd = (up - down) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err < 1e-4, "coord {i}: fd {fd} analytic {}", grad[i]);
            }
        }
    }

    #[test]
    fn zero_inputs_give_zero_first_layer_weight_grads() {
        let arch = Architecture::mlp(4, &[5], 3);
        let c = Classifier::new(arch).unwrap();
        let params = c.init_params(3);
        let batch = Batch::new(4, vec![0.0; 12], vec![0, 1, 2]).unwrap();
        let grad = c.backward(&params, &batch).unwrap();
        assert!(grad[..20].iter().all(|&g| g == 0.0));
        assert!(grad[20..].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn duplicated_sample_gradient_equals_single() {
        let arch = Architecture::mlp(3, &[4], 3);
        let c = Classifier::new(arch).unwrap();
        let params = c.init_params(4);
        let one = Batch::new(3, vec![0.3, -1.2, 0.7], vec![2]).unwrap();
        let mut many = Batch::with_dim(3);
        for _ in 0..5 {
            many.push(one.row(0), 2);
        }
        let g1 = c.backward(&params, &one).unwrap();
        let g5 = c.backward(&params, &many).unwrap();
        for (a, b) in g1.iter().zip(&g5) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let c = Classifier::new(Architecture::logistic(3, 2)).unwrap();
        let params = vec![0.0; c.param_count()];
        let batch = random_batch(4, 2, 3, 0);
        assert!(matches!(c.forward_loss(&params, &batch), Err(Error::DimensionMismatch { .. })));
        assert!(c.forward_loss(&params[1..], &random_batch(3, 2, 3, 0)).is_err());
    }

    #[test]
    fn sgd_reduces_to_plain_step() {
        let mut opt = SgdMomentum::new(3, 0.0, 0.0);
        let mut w = vec![1.0, 2.0, 3.0];
        opt.step(&mut w, &[0.5, -1.0, 0.0], 0.1);
        assert_eq!(w, vec![1.0 - 0.05, 2.0 + 0.1, 3.0]);

        let mut opt = SgdMomentum::new(2, 0.9, 0.0);
        let mut w = vec![1.5, -2.0];
        opt.step(&mut w, &[0.0, 0.0], 0.3);
        assert_eq!(w, vec![1.5, -2.0]);
    }

    #[test]
    fn two_momentum_steps_match_hand_unroll() {
        let (m, wd, lr) = (0.9, 0.01, 0.05);
        let (w0, g1, g2) = (0.8f64, 0.3f64, -0.2f64);
        let b1 = g1 + wd * w0;
        let w1 = w0 - lr * b1;
        let b2 = m * b1 + (g2 + wd * w1);
        let w2 = w1 - lr * b2;

        let mut opt = SgdMomentum::new(1, m, wd);
        let mut w = vec![w0];
        opt.step(&mut w, &[g1], lr);
        opt.step(&mut w, &[g2], lr);
        assert!((w[0] - w2).abs() < 1e-12);
    }

    #[test]
    fn scale_lr_examples() {
        assert_eq!(scale_lr(0.1, 1024.0, 1024), 0.1);
        assert!((scale_lr(0.1, 2048.0, 1024) - 0.2).abs() < 1e-15);
        assert!((scale_lr(0.01, 16.0 * 38.0, 1024) - 0.0059375).abs() < 1e-15);
    }

    #[test]
    fn step_schedule_multiplies_reached_milestones() {
        let s = StepSchedule { base_lr: 0.1, milestones: vec![(75, 0.2), (150, 0.2), (225, 0.2)] };
        assert_eq!(s.lr_at(0), 0.1);
        assert_eq!(s.lr_at(74), 0.1);
        assert!((s.lr_at(75) - 0.02).abs() < 1e-15);
        assert!((s.lr_at(200) - 0.004).abs() < 1e-15);
        assert!((s.lr_at(1000) - 0.1 * 0.2 * 0.2 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn evaluate_examples() {
        let c = Classifier::new(Architecture::logistic(1, 4)).unwrap();
        // Constant output: all logits equal, argmax ties to class 0.
        let params = vec![0.0; c.param_count()];
        let test = Batch::new(1, vec![0.5; 8], vec![0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        assert_eq!(c.evaluate(&params, &test).unwrap(), 0.25);

        // Perfect model on two well separated points.
        let c = Classifier::new(Architecture::logistic(1, 2)).unwrap();
        let params = vec![1.0, -1.0, 0.0, 0.0];
        let test = Batch::new(1, vec![2.0, -2.0], vec![0, 1]).unwrap();
        assert_eq!(c.evaluate(&params, &test).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_matches_confusion_matrix_oracle() {
        let arch = Architecture::mlp(5, &[6], 4);
        let c = Classifier::new(arch.clone()).unwrap();
        let params = c.init_params(8);
        let test = random_batch(5, 4, 200, 9);
        let p = ModelParams::unflatten(&arch, &params).unwrap();
        let mut confusion = [[0usize; 4]; 4];
        for r in 0..test.len() {
            let x = test.row(r);
            let h: Vec<f64> = (0..6)
                .map(|j| {
                    (p.layers[0].bias[j] + (0..5).map(|i| p.layers[0].weights[j * 5 + i] * x[i]).sum::<f64>()).tanh()
                })
                .collect();
            let z: Vec<f64> = (0..4)
                .map(|j| p.layers[1].bias[j] + (0..6).map(|i| p.layers[1].weights[j * 6 + i] * h[i]).sum::<f64>())
                .collect();
            let mut best = 0;
            for j in 1..4 {
                if z[j] > z[best] {
                    best = j;
                }
            }
            confusion[test.labels[r]][best] += 1;
        }
        let diag: usize = (0..4).map(|i| confusion[i][i]).sum();
        assert_eq!(c.evaluate(&params, &test).unwrap(), diag as f64 / test.len() as f64);
    }

    #[test]
    fn full_batch_loss_decreases() {
        let c = Classifier::new(Architecture::mlp(2, &[4], 2)).unwrap();
        let mut params = c.init_params(1);
        let mut batch = Batch::with_dim(2);
        for i in 0..20 {
            let x = i as f64 / 10.0 - 1.0;
            batch.push(&[x, 1.0 + x.abs()], 0);
            batch.push(&[x, -1.0 - x.abs()], 1);
        }
        let mut opt = SgdMomentum::new(c.param_count(), 0.0, 0.0);
        let mut prev = c.forward_loss(&params, &batch).unwrap();
        for _ in 0..10 {
            let g = c.backward(&params, &batch).unwrap();
            opt.step(&mut params, &g, 0.05);
            let cur = c.forward_loss(&params, &batch).unwrap();
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::mlp(3, &[4], 2);
        let c = Classifier::new(arch.clone()).unwrap();
        let params = c.init_params(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &arch, &params).unwrap();
        let (a, p) = load_checkpoint(&path).unwrap();
        assert_eq!(a, arch);
        assert_eq!(p, params);
        assert!(save_checkpoint(&path, &arch, &params[1..]).is_err());
    }
}
