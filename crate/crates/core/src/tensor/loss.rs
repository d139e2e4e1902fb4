use super::Tensor;
use crate::error::{Error, Result};

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `-log softmax(z)[label]`, evaluated with max subtraction.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    Ok(log_sum_exp(z) - z[label])
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over a `[B, C]` batch, with optional additive per-class
/// logit offsets. Returns the loss and the softmax probabilities of the
/// shifted logits.
pub(crate) fn batch_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    offsets: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let [b, c] = logits.shape()[..] else {
        return Err(Error::shape("logits must be [B, C]"));
    };
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(off) = offsets {
        if off.len() != c {
            return Err(Error::shape("logit offsets must have one entry per class"));
        }
    }
    let mut probs = Vec::with_capacity(b * c);
    let mut total = 0.0;
    let mut shifted = vec![0.0; c];
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
        }
        match offsets {
            Some(off) => {
                for ((s, z), o) in shifted.iter_mut().zip(row).zip(off) {
                    *s = z + o;
                }
            }
            None => shifted.copy_from_slice(row),
        }
        total += log_sum_exp(&shifted) - shifted[y];
        probs.extend(softmax(&shifted));
    }
    Ok((total / b as f64, probs))
}

/// Mean squared off-diagonal entry of the batch correlation matrix of
/// `features: [B, d]`, i.e. `(1/d²) Σ_{i≠j} K_ij²` with `K = ZᵀZ / B` and `Z`
/// the column-standardized features. Returns the value, the standardized
/// features, the per-column inverse standard deviations and `K`.
pub(crate) fn decorrelation_penalty(
    features: &Tensor,
    eps: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let [b, d] = features.shape()[..] else {
        return Err(Error::shape("decorrelation needs [B, d] features"));
    };
    if b < 2 {
        return Err(Error::invalid("decorrelation needs a batch of at least 2"));
    }
    let f = features.data();
    let mut z = vec![0.0; b * d];
    let mut inv_std = vec![0.0; d];
    for j in 0..d {
        let mean = (0..b).map(|i| f[i * d + j]).sum::<f64>() / b as f64;
        let var = (0..b).map(|i| (f[i * d + j] - mean).powi(2)).sum::<f64>() / b as f64;
        let is = 1.0 / (var + eps * eps).sqrt();
        inv_std[j] = is;
        for i in 0..b {
            z[i * d + j] = (f[i * d + j] - mean) * is;
        }
    }
    let mut k = vec![0.0; d * d];
    for row in z.chunks_exact(d) {
        for p in 0..d {
            for q in 0..d {
                k[p * d + q] += row[p] * row[q];
            }
        }
    }
    let mut value = 0.0;
    for p in 0..d {
        for q in 0..d {
            k[p * d + q] /= b as f64;
            if p != q {
                value += k[p * d + q].powi(2);
            }
        }
    }
    Ok((value / (d * d) as f64, z, inv_std, k))
}

pub(crate) fn decorrelation_backward(
    b: usize,
    d: usize,
    z: &[f64],
    inv_std: &[f64],
    k: &[f64],
    upstream: f64,
) -> Vec<f64> {
    // dL/dK_pq = 2 K_pq / d² off the diagonal; dZ = Z (G + Gᵀ) / B with G symmetric.
    let scale = upstream * 2.0 / (d * d) as f64;
    let mut dz = vec![0.0; b * d];
    for i in 0..b {
        for q in 0..d {
            let mut acc = 0.0;
            for p in 0..d {
                if p != q {
                    acc += z[i * d + p] * k[p * d + q];
                }
            }
            dz[i * d + q] = 2.0 * scale * acc / b as f64;
        }
    }
    let mut df = vec![0.0; b * d];
    for j in 0..d {
        let mean_dz = (0..b).map(|i| dz[i * d + j]).sum::<f64>() / b as f64;
        let mean_dzz = (0..b).map(|i| dz[i * d + j] * z[i * d + j]).sum::<f64>() / b as f64;
        for i in 0..b {
            df[i * d + j] = inv_std[j] * (dz[i * d + j] - mean_dz - z[i * d + j] * mean_dzz);
        }
    }
    df
}
