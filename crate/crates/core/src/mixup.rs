//! Multi-Mixup: class-stratified K-way interpolation producing interior simplex labels.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::distributions::{dirichlet_sample, DirichletParams, ProbVector};
use crate::error::{Error, Result};
use crate::numcore::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    /// Dirichlet concentration of the mixing weights.
    pub beta: f64,
    /// Samples drawn per class per step.
    pub r: usize,
    /// Shuffle iterations per step.
    pub s: usize,
    /// Lower bound on every label coordinate.
    pub label_clamp: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            beta: 1.0,
            r: 10,
            s: 10,
            label_clamp: 1e-6,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::arg(format!("mixup beta must be positive, got {}", self.beta)));
        }
        if self.r == 0 || self.s == 0 {
            return Err(Error::arg("mixup r and s must be at least 1"));
        }
        if !(self.label_clamp > 0.0 && self.label_clamp * class_count as f64 <= 1.0) {
            return Err(Error::arg(format!(
                "label clamp {} must lie in (0, 1/{class_count})",
                self.label_clamp
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.r * self.s
    }
}

/// One bucket of inputs per class, all of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBuckets {
    buckets: Vec<Tensor>,
    classes: Vec<usize>,
}

impl ClassBuckets {
    /// `classes[k]` is the label carried by every row of `buckets[k]`.
    pub fn new(buckets: Vec<Tensor>, classes: Vec<usize>) -> Result<Self> {
        if buckets.len() < 2 || buckets.len() != classes.len() {
            return Err(Error::arg("need one bucket per class and at least two classes"));
        }
        let (r, d) = (buckets[0].rows(), buckets[0].cols());
        if r == 0 || buckets.iter().any(|b| b.rows() != r || b.cols() != d) {
            return Err(Error::arg("class buckets differ in size"));
        }
        let k = buckets.len();
        let mut seen = vec![false; k];
        for &c in &classes {
            if c >= k || std::mem::replace(&mut seen[c], true) {
                return Err(Error::arg("bucket classes must be a permutation of 0..K"));
            }
        }
        Ok(ClassBuckets { buckets, classes })
    }

    pub fn buckets(&self) -> &[Tensor] {
        &self.buckets
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn class_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket_size(&self) -> usize {
        self.buckets[0].rows()
    }
}

/// Synthetic pairs `(x̃, π̃)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupBatch {
    pub inputs: Tensor,
    /// Clamped, renormalized labels.
    pub labels: Vec<ProbVector>,
    /// `Σ_k w_k y^(k)` before clamping.
    pub raw_labels: Vec<Vec<f64>>,
    /// Mixing weights `w` in bucket order, one row per sample.
    pub weights: Vec<Vec<f64>>,
}

impl MixupBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels as an `[n, K]` matrix.
    pub fn label_matrix(&self) -> Tensor {
        let k = self.labels.first().map_or(0, ProbVector::len);
        let data = self.labels.iter().flat_map(|p| p.values().iter().copied()).collect();
        Tensor::from_parts(self.labels.len(), k, data)
    }
}

/// Per-class row indices of a dataset, built once and reused every step.
#[derive(Clone, Debug)]
pub struct StratifiedSampler<'a> {
    dataset: &'a LabeledDataset,
    by_class: Vec<Vec<usize>>,
}

impl<'a> StratifiedSampler<'a> {
    pub fn new(dataset: &'a LabeledDataset) -> Result<Self> {
        let by_class = dataset.class_indices();
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("class {c} has no samples")));
        }
        Ok(StratifiedSampler { dataset, by_class })
    }

    /// `r` rows per class: without replacement when the class has at least `r`
    /// samples, uniformly with replacement otherwise.
    pub fn sample(&self, r: usize, rng: &mut Rng) -> Result<ClassBuckets> {
        if r == 0 {
            return Err(Error::arg("bucket size must be positive"));
        }
        let mut buckets = Vec::with_capacity(self.by_class.len());
        let mut pool = Vec::new();
        for idx in &self.by_class {
            let chosen: Vec<usize> = if idx.len() >= r {
                pool.clear();
                pool.extend_from_slice(idx);
                for i in 0..r {
                    let j = i + rng.below(pool.len() - i);
                    pool.swap(i, j);
                }
                pool[..r].to_vec()
            } else {
                (0..r).map(|_| idx[rng.below(idx.len())]).collect()
            };
            buckets.push(self.dataset.inputs().select_rows(&chosen));
        }
        ClassBuckets::new(buckets, (0..self.by_class.len()).collect())
    }
}

pub fn stratified_minibatches(dataset: &LabeledDataset, r: usize, rng: &mut Rng) -> Result<ClassBuckets> {
    StratifiedSampler::new(dataset)?.sample(r, rng)
}

/// Raises every coordinate below `eps` to `eps` and rescales the rest so the
/// vector still sums to one. Repeats until no free coordinate falls below `eps`.
pub fn clamp_label(raw: &[f64], eps: f64) -> Vec<f64> {
    let k = raw.len();
    let mut fixed = vec![false; k];
    let mut out = raw.to_vec();
    loop {
        let n_fixed = fixed.iter().filter(|f| **f).count();
        let free_mass: f64 = raw.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(v, _)| v).sum();
        let target = 1.0 - eps * n_fixed as f64;
        let mut changed = false;
        for i in 0..k {
            if fixed[i] {
                out[i] = eps;
            } else {
                out[i] = raw[i] * target / free_mass;
                if out[i] < eps {
                    fixed[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// One pass of the algorithm: `s` shared weight draws, each applied to `r`
/// positions of independently shuffled buckets.
pub fn multi_mixup_step(buckets: &ClassBuckets, config: &MixupConfig, rng: &mut Rng) -> Result<MixupBatch> {
    let k = buckets.class_count();
    config.validate(k)?;
    if buckets.bucket_size() != config.r {
        return Err(Error::arg(format!(
            "buckets hold {} samples, config asks for {}",
            buckets.bucket_size(),
            config.r
        )));
    }
    let d = buckets.buckets()[0].cols();
    let n = config.batch_size();
    let dir = DirichletParams::symmetric(k, config.beta)?;
    let mut inputs = vec![0.0; n * d];
    let mut labels = Vec::with_capacity(n);
    let mut raw_labels = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut perms: Vec<Vec<usize>> = vec![(0..config.r).collect(); k];
    for s in 0..config.s {
        let w = dirichlet_sample(&dir, rng).into_values();
        for p in perms.iter_mut() {
            rng.shuffle(p);
        }
        let mut raw = vec![0.0; k];
        for (b, &class) in buckets.classes().iter().enumerate() {
            // one-hot label of bucket b, so Σ_b w_b y^(b) places w_b at `class`
            raw[class] += w[b] * 1.0;
        }
        let clamped = ProbVector::new(clamp_label(&raw, config.label_clamp))?;
        for pos in 0..config.r {
            let row = &mut inputs[(s * config.r + pos) * d..][..d];
            for (b, bucket) in buckets.buckets().iter().enumerate() {
                let wb = w[b];
                for (o, x) in row.iter_mut().zip(bucket.row(perms[b][pos])) {
                    *o += wb * x;
                }
            }
            labels.push(clamped.clone());
            raw_labels.push(raw.clone());
            weights.push(w.clone());
        }
    }
    Ok(MixupBatch {
        inputs: Tensor::from_parts(n, d, inputs),
        labels,
        raw_labels,
        weights,
    })
}

/// `0.2, 0.3, …, 2.0`.
pub fn default_beta_grid() -> Vec<f64> {
    (2..=20).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaScore {
    pub beta: f64,
    /// `None` when the run diverged and was excluded.
    pub ece: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSelection {
    pub beta: f64,
    pub ece: f64,
    pub scores: Vec<BetaScore>,
}

/// Calls `score` for every candidate and keeps the lowest validation ECE.
///
/// Divergence errors exclude their candidate; other errors abort. Ties go to the
/// smaller beta.
pub fn tune_beta(grid: &[f64], mut score: impl FnMut(f64) -> Result<f64>) -> Result<BetaSelection> {
    if grid.is_empty() {
        return Err(Error::arg("beta grid is empty"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &beta in grid {
        match score(beta) {
            Ok(ece) if ece.is_finite() => {
                scores.push(BetaScore { beta, ece: Some(ece) });
                let better = match best {
                    None => true,
                    Some((b, e)) => ece < e || (ece == e && beta < b),
                };
                if better {
                    best = Some((beta, ece));
                }
            }
            Ok(ece) => return Err(Error::numeric(format!("ECE {ece} for beta {beta}"))),
            Err(e) if e.is_divergence() => scores.push(BetaScore { beta, ece: None }),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((beta, ece)) => Ok(BetaSelection { beta, ece, scores }),
        None => Err(Error::AllDiverged(grid.len())),
    }
}
