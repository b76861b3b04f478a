//! Synthetic labeled data, IID / label-sharded partitioning across devices,
//! and the randomized data-injection exchange.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ceil_count;
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::seed;

/// Gaussian class clusters in `feature_dim` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub cluster_spread: f64,
    /// Scale of the class means, drawn from `N(0, mean_scale^2)` per coordinate.
    #[serde(default = "default_mean_scale")]
    pub mean_scale: f64,
}

fn default_mean_scale() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("dataset needs at least 2 classes"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be at least 1"));
        }
        if self.samples_per_class < 5 {
            return Err(Error::config("samples_per_class must be at least 5"));
        }
        if !(self.cluster_spread > 0.0) || !(self.mean_scale > 0.0) {
            return Err(Error::config("cluster_spread and mean_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub train: Batch,
    pub test: Batch,
}

/// Draws one cluster per class and splits every class 80/20 into train/test.
/// Train samples are stored class by class.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let mut rng = seed::rng(seed);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    spec.mean_scale * z
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let noise = Normal::new(0.0, spec.cluster_spread).map_err(|e| Error::config(e.to_string()))?;
    let n_train = spec.samples_per_class * 4 / 5;

    let mut train = Batch::with_dim(dim);
    let mut test = Batch::with_dim(dim);
    let mut x = vec![0.0; dim];
    for (label, mean) in means.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            for (xi, m) in x.iter_mut().zip(mean) {
                *xi = m + noise.sample(&mut rng);
            }
            if i < n_train {
                train.push(&x, label);
            } else {
                test.push(&x, label);
            }
        }
    }
    Ok(Dataset { n_classes: spec.n_classes, train, test })
}

/// Writes one row per sample: `feature_dim` features then the integer label.
pub fn write_table<W: Write>(batch: &Batch, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for r in 0..batch.len() {
        let mut rec: Vec<String> = batch.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(batch.labels[r].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<R: Read>(reader: R) -> Result<Batch> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut out: Option<Batch> = None;
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Format("table rows need at least one feature and a label".into()));
        }
        let dim = rec.len() - 1;
        let batch = out.get_or_insert_with(|| Batch::with_dim(dim));
        if batch.dim != dim {
            return Err(Error::DimensionMismatch { expected: batch.dim + 1, got: rec.len() });
        }
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
        let x = rec.iter().take(dim).map(parse).collect::<Result<Vec<f64>>>()?;
        let label =
            rec[dim].trim().parse::<usize>().map_err(|e| Error::Format(format!("label {:?}: {e}", &rec[dim])))?;
        batch.push(&x, label);
    }
    out.ok_or_else(|| Error::Format("empty table".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub mode: PartitionMode,
    /// Labels held by every device in `noniid` mode.
    #[serde(default)]
    pub labels_per_device: usize,
}

impl PartitionPlan {
    pub const IID: PartitionPlan = PartitionPlan { mode: PartitionMode::Iid, labels_per_device: 0 };

    pub fn noniid(labels_per_device: usize) -> Self {
        PartitionPlan { mode: PartitionMode::Noniid, labels_per_device }
    }

    /// Number of disjoint label groups in `noniid` mode.
    fn groups(&self, n_classes: usize, n_devices: usize) -> Result<usize> {
        let l = self.labels_per_device;
        if l == 0 || l > n_classes || !n_classes.is_multiple_of(l) {
            return Err(Error::config(format!(
                "labels_per_device = {l} must divide the number of classes ({n_classes})"
            )));
        }
        let groups = n_classes / l;
        if n_devices < groups {
            return Err(Error::config(format!("{n_devices} devices x {l} labels cannot cover {n_classes} classes")));
        }
        Ok(groups)
    }

    pub fn validate(&self, n_classes: usize, n_devices: usize) -> Result<()> {
        if n_devices == 0 {
            return Err(Error::config("need at least one device"));
        }
        match self.mode {
            PartitionMode::Iid => Ok(()),
            PartitionMode::Noniid => self.groups(n_classes, n_devices).map(|_| ()),
        }
    }
}

/// Splits train-sample indices into one pool per device. Every index lands in
/// exactly one pool.
///
/// In `noniid` mode the shuffled labels are cut into groups of
/// `labels_per_device`; device `d` joins group `d % groups`, and each label's
/// samples are dealt round-robin across the devices of its group.
pub fn partition(
    labels: &[usize],
    n_classes: usize,
    n_devices: usize,
    plan: &PartitionPlan,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    plan.validate(n_classes, n_devices)?;
    let mut rng = seed::rng(seed);
    let mut pools = vec![Vec::new(); n_devices];
    match plan.mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..labels.len()).collect();
            idx.shuffle(&mut rng);
            for (k, i) in idx.into_iter().enumerate() {
                pools[k % n_devices].push(i);
            }
        }
        PartitionMode::Noniid => {
            let groups = plan.groups(n_classes, n_devices)?;
            let mut label_order: Vec<usize> = (0..n_classes).collect();
            label_order.shuffle(&mut rng);
            let mut group_of_label = vec![0; n_classes];
            for (pos, &label) in label_order.iter().enumerate() {
                group_of_label[label] = pos / plan.labels_per_device;
            }
            let members: Vec<Vec<usize>> =
                (0..groups).map(|g| (0..n_devices).filter(|d| d % groups == g).collect()).collect();
            let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
            for (i, &y) in labels.iter().enumerate() {
                by_label[y].push(i);
            }
            // Deal label by label so every member of a group sees each of its labels.
            let mut dealt = vec![0usize; groups];
            for &label in &label_order {
                let g = group_of_label[label];
                let mut idx = std::mem::take(&mut by_label[label]);
                idx.shuffle(&mut rng);
                for i in idx {
                    pools[members[g][dealt[g] % members[g].len()]].push(i);
                    dealt[g] += 1;
                }
            }
        }
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    Ok(pools)
}

/// `(alpha, beta)`: the fraction of devices that share, and the fraction of
/// their batch each one shares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl InjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!(
                "injection alpha and beta must lie in [0, 1], got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One sender and the batch positions it broadcasts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionEntry {
    pub sender: usize,
    /// Positions within the sender's batch, ascending.
    pub positions: Vec<usize>,
}

impl InjectionEntry {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Picks `ceil(alpha * n)` distinct senders; sender `i` shares
/// `ceil(beta * b_i)` positions drawn without replacement from its batch.
pub fn injection_plan<R: Rng + ?Sized>(
    n_devices: usize,
    cfg: &InjectionConfig,
    batch_sizes: &[usize],
    rng: &mut R,
) -> Result<Vec<InjectionEntry>> {
    cfg.validate()?;
    if n_devices < 2 {
        return Err(Error::config("data injection needs at least 2 devices"));
    }
    if batch_sizes.len() != n_devices {
        return Err(Error::DimensionMismatch { expected: n_devices, got: batch_sizes.len() });
    }
    let n_senders = ceil_count(cfg.alpha * n_devices as f64).min(n_devices);
    let devices: Vec<usize> = (0..n_devices).collect();
    let mut senders: Vec<usize> = devices.choose_multiple(rng, n_senders).copied().collect();
    senders.sort_unstable();
    Ok(senders
        .into_iter()
        .map(|sender| {
            let b = batch_sizes[sender];
            let k = ceil_count(cfg.beta * b as f64).min(b);
            let mut positions = rand::seq::index::sample(rng, b, k).into_vec();
            positions.sort_unstable();
            InjectionEntry { sender, positions }
        })
        .collect())
}

/// Appends copies of each sender's selected samples to every other device's
/// batch. Returns the augmented batches and the bytes moved.
pub fn inject<T: Clone>(batches: &[Vec<T>], plan: &[InjectionEntry], sample_bytes: u64) -> Result<(Vec<Vec<T>>, u64)> {
    let n = batches.len();
    let mut out = batches.to_vec();
    let mut bytes = 0u64;
    for entry in plan {
        let src = batches
            .get(entry.sender)
            .ok_or_else(|| Error::config(format!("injection sender {} out of range", entry.sender)))?;
        if let Some(&bad) = entry.positions.iter().find(|&&p| p >= src.len()) {
            return Err(Error::config(format!("injection position {bad} outside batch of {}", src.len())));
        }
        for (d, batch) in out.iter_mut().enumerate() {
            if d != entry.sender {
                batch.extend(entry.positions.iter().map(|&p| src[p].clone()));
            }
        }
        bytes += entry.count() as u64 * (n as u64 - 1) * sample_bytes;
    }
    Ok((out, bytes))
}

/// Labels present in a pool.
pub fn label_set(pool: &[usize], labels: &[usize]) -> BTreeSet<usize> {
    pool.iter().map(|&i| labels[i]).collect()
}
