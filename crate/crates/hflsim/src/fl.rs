//! Hierarchical FL training: pluggable learners, local gradient descent,
//! edge and cloud aggregation, non-IID data partitioning, and optional IDX
//! image ingestion.
//!
//! Aggregations reduce in fixed id order so runs are bitwise reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::AssignmentPattern;
use crate::error::{Error, Result};

/// Flat weight vector with a shape descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub shape: Vec<usize>,
}

impl ModelParams {
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            weights: vec![0.0; self.weights.len()],
            shape: self.shape.clone(),
        }
    }

    fn check_finite(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numerical("non-finite model weights".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Row-major feature vectors.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A differentiable classifier family over flat parameter vectors.
pub trait Learner {
    fn init_params(&self, seed: u64) -> ModelParams;
    /// Mean loss and gradient over the given sample indices (full batch).
    fn loss_grad(&self, params: &ModelParams, data: &Dataset, idx: &[usize]) -> (f64, Vec<f64>);
    fn predict(&self, params: &ModelParams, x: &[f64]) -> usize;
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// One-hidden-layer tanh classifier with softmax cross-entropy loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpLearner {
    pub in_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpLearner {
    pub fn n_params(&self) -> usize {
        self.hidden * self.in_dim + self.hidden + self.classes * self.hidden + self.classes
    }

    fn forward(&self, w: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (h, i, c) = (self.hidden, self.in_dim, self.classes);
        let w1 = &w[..h * i];
        let b1 = &w[h * i..h * i + h];
        let w2 = &w[h * i + h..h * i + h + c * h];
        let b2 = &w[h * i + h + c * h..];
        let mut act = vec![0.0; h];
        for j in 0..h {
            let mut s = b1[j];
            for k in 0..i {
                s += w1[j * i + k] * x[k];
            }
            act[j] = s.tanh();
        }
        let mut logits = vec![0.0; c];
        for j in 0..c {
            let mut s = b2[j];
            for k in 0..h {
                s += w2[j * h + k] * act[k];
            }
            logits[j] = s;
        }
        (act, logits)
    }
}

impl Learner for MlpLearner {
    fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale1 = (1.0 / self.in_dim as f64).sqrt();
        let scale2 = (1.0 / self.hidden as f64).sqrt();
        let mut weights = Vec::with_capacity(self.n_params());
        for _ in 0..self.hidden * self.in_dim {
            weights.push(rng.gen_range(-scale1..scale1));
        }
        weights.extend(std::iter::repeat(0.0).take(self.hidden));
        for _ in 0..self.classes * self.hidden {
            weights.push(rng.gen_range(-scale2..scale2));
        }
        weights.extend(std::iter::repeat(0.0).take(self.classes));
        ModelParams {
            weights,
            shape: vec![self.in_dim, self.hidden, self.classes],
        }
    }

    fn loss_grad(&self, params: &ModelParams, data: &Dataset, idx: &[usize]) -> (f64, Vec<f64>) {
        let (h, i, c) = (self.hidden, self.in_dim, self.classes);
        let w = &params.weights;
        let w1 = &w[..h * i];
        let w2 = &w[h * i + h..h * i + h + c * h];
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let inv = 1.0 / idx.len().max(1) as f64;
        for &s in idx {
            let x = &data.features[s];
            let y = data.labels[s];
            let (act, mut probs) = self.forward(w, x);
            softmax_in_place(&mut probs);
            loss -= (probs[y].max(1e-300)).ln() * inv;
            // d_logits = probs - onehot(y)
            let mut d_act = vec![0.0; h];
            for j in 0..c {
                let d = (probs[j] - if j == y { 1.0 } else { 0.0 }) * inv;
                for k in 0..h {
                    grad[h * i + h + j * h + k] += d * act[k];
                    d_act[k] += d * w2[j * h + k];
                }
                grad[h * i + h + c * h + j] += d;
            }
            for k in 0..h {
                let d = d_act[k] * (1.0 - act[k] * act[k]);
                for m in 0..i {
                    grad[k * i + m] += d * x[m];
                }
                grad[h * i + k] += d;
            }
            let _ = w1;
        }
        (loss, grad)
    }

    fn predict(&self, params: &ModelParams, x: &[f64]) -> usize {
        let (_, logits) = self.forward(&params.weights, x);
        logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap_or(0)
    }
}

/// Linear softmax classifier on a prefix of the feature vector. Serves as the
/// lightweight auxiliary model for device clustering: the feature subsampling
/// stands in for the image-cropping input reduction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiniLearner {
    /// Number of leading features used.
    pub sub_dim: usize,
    pub classes: usize,
}

impl MiniLearner {
    pub fn n_params(&self) -> usize {
        self.classes * self.sub_dim + self.classes
    }
}

impl Learner for MiniLearner {
    fn init_params(&self, _seed: u64) -> ModelParams {
        // common zero init: every device starts from the same point
        ModelParams {
            weights: vec![0.0; self.n_params()],
            shape: vec![self.sub_dim, self.classes],
        }
    }

    fn loss_grad(&self, params: &ModelParams, data: &Dataset, idx: &[usize]) -> (f64, Vec<f64>) {
        let (d, c) = (self.sub_dim, self.classes);
        let w = &params.weights;
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        let inv = 1.0 / idx.len().max(1) as f64;
        for &s in idx {
            let x = &data.features[s][..d];
            let y = data.labels[s];
            let mut logits = vec![0.0; c];
            for j in 0..c {
                let mut v = w[c * d + j];
                for k in 0..d {
                    v += w[j * d + k] * x[k];
                }
                logits[j] = v;
            }
            softmax_in_place(&mut logits);
            loss -= (logits[y].max(1e-300)).ln() * inv;
            for j in 0..c {
                let diff = (logits[j] - if j == y { 1.0 } else { 0.0 }) * inv;
                for k in 0..d {
                    grad[j * d + k] += diff * x[k];
                }
                grad[c * d + j] += diff;
            }
        }
        (loss, grad)
    }

    fn predict(&self, params: &ModelParams, x: &[f64]) -> usize {
        let (d, c) = (self.sub_dim, self.classes);
        let w = &params.weights;
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..c {
            let mut v = w[c * d + j];
            for k in 0..d {
                v += w[j * d + k] * x[k];
            }
            if v > best.1 {
                best = (j, v);
            }
        }
        best.0
    }
}

/// L full-batch gradient steps on the device's samples.
pub fn local_train<L: Learner>(
    learner: &L,
    params: &ModelParams,
    data: &Dataset,
    idx: &[usize],
    local_iters: u32,
    beta: f64,
) -> Result<ModelParams> {
    let mut current = params.clone();
    for _ in 0..local_iters {
        let (_, grad) = learner.loss_grad(&current, data, idx);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient during local training ({} samples)",
                idx.len()
            )));
        }
        for (w, g) in current.weights.iter_mut().zip(&grad) {
            *w -= beta * g;
        }
    }
    current.check_finite()?;
    Ok(current)
}

/// Data-size-weighted average of local models.
pub fn edge_aggregate(locals: &[(&ModelParams, u64)]) -> Result<ModelParams> {
    weighted_average(locals)
}

/// Data-size-weighted average of edge models (same formula, edge weights are
/// the group data totals of the current round).
pub fn cloud_aggregate(edges: &[(&ModelParams, u64)]) -> Result<ModelParams> {
    weighted_average(edges)
}

fn weighted_average(models: &[(&ModelParams, u64)]) -> Result<ModelParams> {
    let (first, _) = models
        .first()
        .ok_or_else(|| Error::Contract("cannot aggregate an empty model set".into()))?;
    let len = first.weights.len();
    let mut total = 0u64;
    let mut out = first.zeros_like();
    for (m, d) in models {
        if m.weights.len() != len {
            return Err(Error::Contract(format!(
                "shape mismatch in aggregation: {} vs {len}",
                m.weights.len()
            )));
        }
        total += d;
    }
    if total == 0 {
        return Err(Error::Contract("aggregation weights sum to zero".into()));
    }
    for (m, d) in models {
        let w = *d as f64 / total as f64;
        for (o, v) in out.weights.iter_mut().zip(&m.weights) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// One global iteration: Q edge iterations of (broadcast, L local steps,
/// edge aggregation) per edge group, then cloud aggregation.
#[allow(clippy::too_many_arguments)]
pub fn run_global_iteration<L: Learner>(
    learner: &L,
    global: &ModelParams,
    pattern: &AssignmentPattern,
    data: &Dataset,
    partition: &DataPartition,
    local_iters: u32,
    edge_iters: u32,
    beta: f64,
) -> Result<ModelParams> {
    let active: Vec<(usize, &Vec<usize>)> = pattern
        .groups
        .iter()
        .filter(|(_, g)| !g.is_empty())
        .map(|(&m, g)| (m, g))
        .collect();
    if active.is_empty() {
        return Ok(global.clone());
    }
    let mut edge_models: Vec<ModelParams> = vec![global.clone(); active.len()];
    for _ in 0..edge_iters {
        for (slot, (_, group)) in active.iter().enumerate() {
            let mut locals: Vec<(ModelParams, u64)> = Vec::with_capacity(group.len());
            for &n in group.iter() {
                let idx = &partition.device_samples[n];
                let trained =
                    local_train(learner, &edge_models[slot], data, idx, local_iters, beta)?;
                locals.push((trained, idx.len() as u64));
            }
            let refs: Vec<(&ModelParams, u64)> = locals.iter().map(|(m, d)| (m, *d)).collect();
            edge_models[slot] = edge_aggregate(&refs)?;
        }
    }
    let weighted: Vec<(&ModelParams, u64)> = active
        .iter()
        .enumerate()
        .map(|(slot, (_, group))| {
            let d: u64 = group
                .iter()
                .map(|&n| partition.device_samples[n].len() as u64)
                .sum();
            (&edge_models[slot], d)
        })
        .collect();
    cloud_aggregate(&weighted)
}

/// Fraction of correct argmax predictions on a test set.
pub fn evaluate<L: Learner>(learner: &L, params: &ModelParams, test: &Dataset) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let correct = test
        .features
        .iter()
        .zip(&test.labels)
        .filter(|(x, &y)| learner.predict(params, x) == y)
        .count();
    correct as f64 / test.len() as f64
}

/// Per-device sample assignment with a skewed majority class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPartition {
    /// device id -> indices into the source dataset.
    pub device_samples: Vec<Vec<usize>>,
    pub n_classes: usize,
    /// Majority fraction rho.
    pub majority_fraction: f64,
    /// Ground-truth majority label per device.
    pub majority_label: Vec<usize>,
}

/// Skewed partition: device d's majority class is `d mod n_classes`; a
/// fraction rho of its samples come from that class, the remainder uniformly
/// from the others. No sample is assigned twice.
pub fn partition_non_iid(
    data: &Dataset,
    n_devices: usize,
    rho: f64,
    size_range: (usize, usize),
    seed: u64,
) -> Result<DataPartition> {
    if size_range.0 > size_range.1 || size_range.0 == 0 {
        return Err(Error::Config(format!("bad size range {size_range:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (0..n_devices)
        .map(|_| {
            if size_range.0 == size_range.1 {
                size_range.0
            } else {
                rng.gen_range(size_range.0..=size_range.1)
            }
        })
        .collect();
    partition_with_sizes(data, &sizes, rho, seed.wrapping_add(1))
}

/// [`partition_non_iid`] with an explicit per-device sample count, so the
/// data volumes can be kept identical to the cost model's D_n values.
pub fn partition_with_sizes(
    data: &Dataset,
    sizes: &[usize],
    rho: f64,
    seed: u64,
) -> Result<DataPartition> {
    let n_devices = sizes.len();
    let k = data.n_classes;
    if k < 2 {
        return Err(Error::Config("partitioning needs at least 2 classes".into()));
    }
    if rho <= 1.0 / k as f64 || rho > 1.0 {
        return Err(Error::Config(format!(
            "majority fraction must be in (1/{k}, 1], got {rho}"
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config("every device needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in data.labels.iter().enumerate() {
        pools[y].push(i);
    }
    for pool in pools.iter_mut() {
        shuffle(pool, &mut rng);
    }
    let mut device_samples = Vec::with_capacity(n_devices);
    let mut majority_label = Vec::with_capacity(n_devices);
    for d in 0..n_devices {
        let major = d % k;
        let size = sizes[d];
        let n_major = ((rho * size as f64).round() as usize).min(size);
        let mut samples = Vec::with_capacity(size);
        for _ in 0..n_major {
            let s = pools[major].pop().ok_or_else(|| {
                Error::Config(format!("insufficient samples of class {major}"))
            })?;
            samples.push(s);
        }
        for _ in n_major..size {
            // uniform over the non-majority classes with remaining samples
            let candidates: Vec<usize> = (0..k)
                .filter(|&c| c != major && !pools[c].is_empty())
                .collect();
            let c = *candidates
                .get(rng.gen_range(0..candidates.len().max(1)))
                .ok_or_else(|| Error::Config("insufficient minority samples".into()))?;
            samples.push(pools[c].pop().unwrap());
        }
        samples.sort_unstable();
        device_samples.push(samples);
        majority_label.push(major);
    }
    Ok(DataPartition {
        device_samples,
        n_classes: k,
        majority_fraction: rho,
        majority_label,
    })
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Synthetic Gaussian-mixture classification data: one spherical cluster per
/// class with unit noise around a seeded random mean.
pub fn generate_synthetic(
    samples_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0) * separation).collect())
        .collect();
    let mut features = Vec::with_capacity(samples_per_class * n_classes);
    let mut labels = Vec::with_capacity(samples_per_class * n_classes);
    for c in 0..n_classes {
        for _ in 0..samples_per_class {
            let x: Vec<f64> = means[c]
                .iter()
                .map(|&m| m + normal(&mut rng))
                .collect();
            features.push(x);
            labels.push(c);
        }
    }
    // deterministic interleave so class blocks do not bias index-based splits
    let mut order: Vec<usize> = (0..labels.len()).collect();
    shuffle(&mut order, &mut rng);
    Dataset {
        features: order.iter().map(|&i| features[i].clone()).collect(),
        labels: order.iter().map(|&i| labels[i]).collect(),
        n_classes,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Parse IDX-format images (magic 0x00000803): big-endian dims, one byte per
/// pixel, scaled to [0,1].
pub fn read_idx_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 16 {
        return Err(Error::Serde("idx image file too short".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != 0x0000_0803 {
        return Err(Error::Serde(format!("bad idx image magic {magic:#x}")));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rows = u32::from_be_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let pix = rows * cols;
    if bytes.len() < 16 + n * pix {
        return Err(Error::Serde("idx image payload truncated".into()));
    }
    Ok((0..n)
        .map(|i| {
            bytes[16 + i * pix..16 + (i + 1) * pix]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect()
        })
        .collect())
}

/// Parse IDX-format labels (magic 0x00000801).
pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(Error::Serde("idx label file too short".into()));
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    if magic != 0x0000_0801 {
        return Err(Error::Serde(format!("bad idx label magic {magic:#x}")));
    }
    let n = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Serde("idx label payload truncated".into()));
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Load an image/label IDX pair into a dataset.
pub fn load_idx_dataset(images: &[u8], labels: &[u8], n_classes: usize) -> Result<Dataset> {
    let features = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if features.len() != labels.len() {
        return Err(Error::Serde(format!(
            "idx pair length mismatch: {} images vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    Ok(Dataset {
        features,
        labels,
        n_classes,
    })
}
