//! Normalization operators on single vectors, plus the batch-norm state.
//!
//! Every operator here is a pure function of its input except
//! [`BatchNormState::normalize`], which updates running statistics in
//! training mode. The companion `*_backward` functions are the exact
//! vector-Jacobian products used by the gradient tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stabilizer used throughout training.
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Default momentum of batch-norm running statistics.
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation (divides by `d`).
pub fn std_dev(x: &[f64]) -> f64 {
    let mu = mean(x);
    (x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean-variance normalization `(x − μ𝟙) / √(σ² + ε²)`. Returns the output and
/// the inverse scale `1/√(σ² + ε²)`.
pub fn mv_normalize_with_scale(x: &[f64], eps: f64) -> Result<(Vec<f64>, f64)> {
    if x.is_empty() {
        return Err(Error::invalid("empty vector"));
    }
    let mu = mean(x);
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / x.len() as f64;
    let denom = (var + eps * eps).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "mean-variance normalization of a constant vector with ε = 0".into(),
        ));
    }
    let inv = 1.0 / denom;
    Ok((x.iter().map(|v| (v - mu) * inv).collect(), inv))
}

pub fn mv_normalize(x: &[f64], eps: f64) -> Result<Vec<f64>> {
    mv_normalize_with_scale(x, eps).map(|(y, _)| y)
}

/// Vector-Jacobian product of MV normalization given its output `y` and
/// inverse scale.
pub fn mv_backward(y: &[f64], inv_scale: f64, dy: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dyy = dy.iter().zip(y).map(|(g, v)| g * v).sum::<f64>() / n;
    dy.iter()
        .zip(y)
        .map(|(g, v)| inv_scale * (g - mean_dy - v * mean_dyy))
        .collect()
}

/// Scale normalization `√d · x / max(ε, ‖x‖)`. A zero vector with `ε = 0`
/// maps to zero.
pub fn scale_normalize(x: &[f64], eps: f64) -> Vec<f64> {
    let denom = eps.max(l2_norm(x));
    if denom == 0.0 {
        return vec![0.0; x.len()];
    }
    let s = (x.len() as f64).sqrt() / denom;
    x.iter().map(|v| v * s).collect()
}

/// Vector-Jacobian product of scale normalization at input `x`.
pub fn scale_backward(x: &[f64], eps: f64, dy: &[f64]) -> Vec<f64> {
    let sqrt_d = (x.len() as f64).sqrt();
    let norm = l2_norm(x);
    if norm > eps {
        let dot = x.iter().zip(dy).map(|(a, g)| a * g).sum::<f64>();
        let inv = 1.0 / norm;
        dy.iter()
            .zip(x)
            .map(|(g, a)| sqrt_d * inv * (g - a * dot * inv * inv))
            .collect()
    } else if eps > 0.0 {
        dy.iter().map(|g| g * sqrt_d / eps).collect()
    } else {
        vec![0.0; x.len()]
    }
}

/// Mean shift `x − μ(x)𝟙`, the projection `P = I − (1/d)𝟙𝟙ᵀ`.
pub fn mean_shift(x: &[f64]) -> Vec<f64> {
    let mu = mean(x);
    x.iter().map(|v| v - mu).collect()
}

/// `γ ⊙ mv_normalize(x, ε) + β`.
pub fn mv_learnable(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gamma.len() != x.len() || beta.len() != x.len() {
        return Err(Error::shape("γ and β must match the input length"));
    }
    let y = mv_normalize(x, eps)?;
    Ok(y.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| g * v + b)
        .collect())
}

/// MV-normalizes each of `groups` contiguous, equally sized sub-vectors.
pub fn group_normalize(x: &[f64], groups: usize, eps: f64) -> Result<Vec<f64>> {
    if groups == 0 || !x.len().is_multiple_of(groups) {
        return Err(Error::invalid(format!(
            "{groups} groups do not divide a vector of length {}",
            x.len()
        )));
    }
    let size = x.len() / groups;
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks_exact(size) {
        out.extend(mv_normalize(chunk, eps)?);
    }
    Ok(out)
}

/// Batch-norm running statistics for `channels` features, each spanning
/// `spatial` consecutive entries of a row (`spatial = 1` for dense layers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub spatial: usize,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize, spatial: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            spatial,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `run ← (1 − m)·run + m·batch`.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Normalizes a `[B, channels * spatial]` batch. Training mode uses and
    /// records batch statistics; evaluation mode uses the running ones.
    pub fn normalize(&mut self, x: &Tensor, training: bool) -> Result<Tensor> {
        if training {
            let stats = batch_statistics(x, self.channels(), self.spatial)?;
            let out = apply_statistics(x, &stats.mean, &stats.var, self.eps, self.spatial)?;
            self.update(&stats);
            Ok(out)
        } else {
            apply_statistics(x, &self.running_mean, &self.running_var, self.eps, self.spatial)
        }
    }
}

/// Per-channel batch mean and (population) variance.
pub fn batch_statistics(x: &Tensor, channels: usize, spatial: usize) -> Result<BatchStats> {
    let b = x.batch();
    if x.rank() < 2 || x.row_len() != channels * spatial {
        return Err(Error::shape(format!(
            "batch norm over {channels}x{spatial} features got {:?}",
            x.shape()
        )));
    }
    if b < 2 {
        return Err(Error::invalid("batch norm needs at least 2 samples in training mode"));
    }
    let count = (b * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for row in x.rows() {
        for (c, chunk) in row.chunks_exact(spatial).enumerate() {
            mean[c] += chunk.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for row in x.rows() {
        for (c, chunk) in row.chunks_exact(spatial).enumerate() {
            var[c] += chunk.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok(BatchStats { mean, var })
}

pub(crate) fn apply_statistics(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    spatial: usize,
) -> Result<Tensor> {
    if x.row_len() != mean.len() * spatial {
        return Err(Error::shape("batch norm width mismatch"));
    }
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps * eps).sqrt()).collect();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("batch norm with zero variance and ε = 0".into()));
    }
    let mut out = x.clone();
    let n = x.row_len();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (c, chunk) in row.chunks_exact_mut(spatial).enumerate() {
            for v in chunk {
                *v = (*v - mean[c]) * inv[c];
            }
        }
    }
    Ok(out)
}

/// Named normalization operator with its stabilizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NormKind {
    Mv,
    Scale,
    Shift,
    MvLearnable { gamma: Vec<f64>, beta: Vec<f64> },
    Group { groups: usize },
    Batch(BatchNormState),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormOp {
    pub kind: NormKind,
    pub epsilon: f64,
}

impl NormOp {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Applies the operator to a single vector. Batch norm needs a batch and
    /// is applied through [`BatchNormState::normalize`] instead.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let eps = self.epsilon;
        match &self.kind {
            NormKind::Mv => mv_normalize(x, eps),
            NormKind::Scale => Ok(scale_normalize(x, eps)),
            NormKind::Shift => Ok(mean_shift(x)),
            NormKind::MvLearnable { gamma, beta } => mv_learnable(x, gamma, beta, eps),
            NormKind::Group { groups } => group_normalize(x, *groups, eps),
            NormKind::Batch(_) => Err(Error::invalid(
                "batch normalization needs a batch; use BatchNormState::normalize",
            )),
        }
    }
}
