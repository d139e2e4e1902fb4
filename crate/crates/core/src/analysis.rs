//! Diagnostics of feature geometry under local training: singular spectra of
//! feature matrices, norm growth of class vectors and embeddings, and the
//! few-step local-overfitting probe.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::federation::{local_train_with_hook, predict_indices, Algorithm};
use crate::model::Model;
use crate::norm::l2_norm;
use crate::tensor::Tensor;

/// Off-diagonal convergence threshold of the Jacobi sweeps, relative to the
/// column norms.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;
/// Largest dimension accepted by [`svd_singular_values`].
pub const MAX_SVD_DIM: usize = 2048;

/// Singular values of a row-major `[a, b]` matrix in descending order, by
/// one-sided Jacobi rotations on the columns. Returns `min(a, b)` values.
pub fn svd_singular_values(m: &Tensor) -> Result<Vec<f64>> {
    if m.rank() != 2 {
        return Err(Error::shape(format!("expected a matrix, got shape {:?}", m.shape())));
    }
    let (a, b) = (m.shape()[0], m.shape()[1]);
    if a > MAX_SVD_DIM || b > MAX_SVD_DIM {
        return Err(Error::invalid(format!("{a}×{b} exceeds the small-matrix limit {MAX_SVD_DIM}")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    // Rotate whichever side has fewer vectors; store them as contiguous rows.
    let (n, len, mut cols) = if b <= a {
        (b, a, m.transpose()?.into_data())
    } else {
        (a, b, m.data().to_vec())
    };
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (u, v) = (&cols[p * len..(p + 1) * len], &cols[q * len..(q + 1) * len]);
                    let mut s = (0.0, 0.0, 0.0);
                    for (x, y) in u.iter().zip(v) {
                        s.0 += x * x;
                        s.1 += y * y;
                        s.2 += x * y;
                    }
                    s
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (head, tail) = cols.split_at_mut(q * len);
                let u = &mut head[p * len..(p + 1) * len];
                let v = &mut tail[..len];
                for (x, y) in u.iter_mut().zip(v.iter_mut()) {
                    let (xu, yv) = (*x, *y);
                    *x = c * xu - s * yv;
                    *y = s * xu + c * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.chunks_exact(len.max(1)).take(n).map(l2_norm).collect();
    sv.resize(n, 0.0);
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    /// `σ₁/σ₂`; infinite when `σ₂ = 0`, serialized as `"inf"`.
    #[serde(serialize_with = "ser_gap", deserialize_with = "de_gap")]
    pub spectral_gap: f64,
    /// Count of `σᵢ > 0.01·σ₁`.
    pub effective_rank: usize,
}

fn ser_gap<S: Serializer>(g: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if g.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*g)
    }
}

fn de_gap<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Gap {
        Num(f64),
        Str(String),
    }
    match Gap::deserialize(d)? {
        Gap::Num(v) => Ok(v),
        Gap::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Gap::Str(s) => Err(serde::de::Error::custom(format!("bad spectral gap {s:?}"))),
    }
}

/// Spectrum of an arbitrary matrix with at least two singular values.
pub fn spectrum(m: &Tensor) -> Result<SpectrumReport> {
    let singular_values = svd_singular_values(m)?;
    if singular_values.len() < 2 {
        return Err(Error::invalid("a spectral gap needs at least two singular values"));
    }
    let (s1, s2) = (singular_values[0], singular_values[1]);
    let spectral_gap = if s2 > 0.0 { s1 / s2 } else { f64::INFINITY };
    let effective_rank = singular_values.iter().filter(|&&s| s > 0.01 * s1).count();
    Ok(SpectrumReport {
        singular_values,
        spectral_gap,
        effective_rank,
    })
}

/// `[d_L, m]` matrix whose columns are the embeddings fed to the classifier.
pub fn feature_matrix(model: &Model, samples: &Tensor) -> Result<Tensor> {
    if samples.batch() == 0 {
        return Err(Error::invalid("feature matrix of no samples"));
    }
    let (_, features) = model.forward(samples)?;
    features.transpose()
}

pub fn spectral_gap(model: &Model, samples: &Tensor) -> Result<SpectrumReport> {
    if samples.batch() < 2 {
        return Err(Error::invalid("spectral gap needs at least two samples"));
    }
    spectrum(&feature_matrix(model, samples)?)
}

/// `count` sample indices dealt round-robin over the classes, each class's
/// order shuffled by `seed`.
pub fn probe_indices(data: &Dataset, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class = data.indices_by_class();
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let mut out = Vec::with_capacity(count);
    let mut depth = 0;
    while out.len() < count {
        let before = out.len();
        for idx in &by_class {
            if let Some(&i) = idx.get(depth) {
                if out.len() < count {
                    out.push(i);
                }
            }
        }
        if out.len() == before {
            break;
        }
        depth += 1;
    }
    out
}

/// Largest probe set a [`NormTracer`] accepts.
pub const MAX_PROBES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRecord {
    pub step: usize,
    /// Training objective of the step; `None` before training.
    pub loss: Option<f64>,
    /// `‖w_c‖` for every class.
    pub class_norms: Vec<f64>,
    /// `‖g(x)‖` for every probe sample.
    pub feature_norms: Vec<f64>,
}

impl NormRecord {
    /// `max(max_c ‖w_c‖, max_i ‖g(x_i)‖)`.
    pub fn max_norm(&self) -> f64 {
        self.class_norms
            .iter()
            .chain(&self.feature_norms)
            .fold(0.0, |a, &b| a.max(b))
    }

    pub fn max_feature_norm(&self) -> f64 {
        self.feature_norms.iter().fold(0.0, |a, &b| a.max(b))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub records: Vec<NormRecord>,
}

/// Training hook recording class-vector and embedding norms over a fixed
/// probe set.
pub struct NormTracer {
    probes: Tensor,
    trace: NormTrace,
}

impl NormTracer {
    pub fn new(probes: Tensor) -> Result<Self> {
        if probes.batch() == 0 || probes.batch() > MAX_PROBES {
            return Err(Error::invalid(format!("probe set must hold 1..={MAX_PROBES} samples")));
        }
        Ok(Self {
            probes,
            trace: NormTrace::default(),
        })
    }

    pub fn observe(&mut self, step: usize, model: &Model, loss: Option<f64>) -> Result<()> {
        let (_, features) = model.forward(&self.probes)?;
        self.trace.records.push(NormRecord {
            step,
            loss,
            class_norms: model.classifier().rows().map(l2_norm).collect(),
            feature_norms: features.rows().map(l2_norm).collect(),
        });
        Ok(())
    }

    pub fn finish(self) -> NormTrace {
        self.trace
    }
}

/// Local SGD settings for the probes below.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalSchedule {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Plain local training on `shard` with norms traced at step 0 and after
/// every step. Stops early once a step's loss falls below `stop_below`.
pub fn norm_trace(
    model: &Model,
    data: &Dataset,
    shard: &ClientShard,
    probes: &Tensor,
    schedule: &LocalSchedule,
    stop_below: Option<f64>,
) -> Result<(NormTrace, Model)> {
    let mut tracer = NormTracer::new(probes.clone())?;
    tracer.observe(0, model, None)?;
    if schedule.steps == 0 {
        return Ok((tracer.finish(), model.clone()));
    }
    let outcome = local_train_with_hook(
        model,
        data,
        shard,
        &Algorithm::FedAvg,
        schedule.steps,
        schedule.lr,
        schedule.batch_size,
        None,
        schedule.seed,
        |step, m, loss| {
            tracer.observe(step, m, Some(loss))?;
            Ok(stop_below.is_none_or(|t| loss >= t))
        },
    )?;
    let mut trained = model.clone();
    trained.set_params(outcome.params)?;
    Ok((tracer.finish(), trained))
}

/// Mean over samples of `log Σ_c exp((w_c − w_k)ᵀ g(x))` for a shard whose
/// samples all carry label `k`; equals the cross-entropy on that shard.
pub fn one_class_loss(model: &Model, x: &Tensor, k: usize) -> Result<f64> {
    if k >= model.classes() {
        return Err(Error::invalid(format!("class {k} out of range")));
    }
    let (_, features) = model.forward(x)?;
    let w = model.classifier();
    let wk = w.row(k);
    let mut total = 0.0;
    for g in features.rows() {
        let margins: Vec<f64> = w
            .rows()
            .map(|wc| wc.iter().zip(wk).zip(g).map(|((a, b), gi)| (a - b) * gi).sum())
            .collect();
        let top = margins.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        total += top + margins.iter().map(|m| (m - top).exp()).sum::<f64>().ln();
    }
    Ok(total / features.batch() as f64)
}

/// Per-class test accuracy; `None` for classes without test samples.
pub fn per_class_accuracy(model: &Model, test: &Dataset) -> Result<Vec<Option<f64>>> {
    let all: Vec<usize> = (0..test.len()).collect();
    let pred = predict_indices(model, test, &all)?;
    let c = test.num_classes();
    let (mut hit, mut n) = (vec![0usize; c], vec![0usize; c]);
    for (&y, p) in test.labels().iter().zip(pred) {
        n[y] += 1;
        hit[y] += usize::from(y == p);
    }
    Ok(hit
        .iter()
        .zip(&n)
        .map(|(&h, &m)| (m > 0).then(|| h as f64 / m as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub steps: usize,
    pub own_classes: Vec<usize>,
    pub per_class_before: Vec<Option<f64>>,
    pub per_class_after: Vec<Option<f64>>,
    pub local_acc_before: f64,
    pub local_acc_after: f64,
}

impl OverfitReport {
    fn mean_other(&self, accs: &[Option<f64>]) -> Option<f64> {
        let others: Vec<f64> = accs
            .iter()
            .enumerate()
            .filter(|(c, _)| !self.own_classes.contains(c))
            .filter_map(|(_, a)| *a)
            .collect();
        (!others.is_empty()).then(|| others.iter().sum::<f64>() / others.len() as f64)
    }

    /// Mean test accuracy over classes absent from the client, before training.
    pub fn other_class_acc_before(&self) -> Option<f64> {
        self.mean_other(&self.per_class_before)
    }

    pub fn other_class_acc_after(&self) -> Option<f64> {
        self.mean_other(&self.per_class_after)
    }

    /// Fall in mean other-class accuracy caused by local training.
    pub fn other_class_drop(&self) -> Option<f64> {
        Some(self.other_class_acc_before()? - self.other_class_acc_after()?)
    }
}

/// Clones the global model, trains it locally on `shard` and reports test
/// accuracy per class before and after, plus accuracy on the shard itself.
pub fn local_overfit_probe(
    global: &Model,
    train: &Dataset,
    shard: &ClientShard,
    test: &Dataset,
    schedule: &LocalSchedule,
) -> Result<OverfitReport> {
    let own_classes = shard.present_classes();
    if own_classes.len() > train.num_classes() {
        return Err(Error::invalid("client holds more classes than exist"));
    }
    let local_acc = |m: &Model| -> Result<f64> {
        let pred = predict_indices(m, train, &shard.indices)?;
        let hits = shard
            .indices
            .iter()
            .zip(pred)
            .filter(|(&i, p)| train.labels()[i] == *p)
            .count();
        Ok(hits as f64 / shard.m().max(1) as f64)
    };
    let per_class_before = per_class_accuracy(global, test)?;
    let local_acc_before = local_acc(global)?;
    let after = if schedule.steps == 0 {
        global.clone()
    } else {
        let outcome = local_train_with_hook(
            global,
            train,
            shard,
            &Algorithm::FedAvg,
            schedule.steps,
            schedule.lr,
            schedule.batch_size,
            None,
            schedule.seed,
            |_, _, _| Ok(true),
        )?;
        let mut m = global.clone();
        m.set_params(outcome.params)?;
        m
    };
    Ok(OverfitReport {
        steps: schedule.steps,
        own_classes,
        per_class_after: per_class_accuracy(&after, test)?,
        local_acc_after: local_acc(&after)?,
        per_class_before,
        local_acc_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetworkSpec, NormMode};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn identity_and_rank_one() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert!(close(&svd_singular_values(&eye).unwrap(), &[1.0, 1.0, 1.0], 1e-14));
        let (u, v) = ([1.0, 2.0, 2.0], [3.0, 4.0]);
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let m = Tensor::from_rows(&rows).unwrap();
        let sv = svd_singular_values(&m).unwrap();
        assert!(close(&sv, &[15.0, 0.0], 1e-12));
        assert!(spectrum(&m).unwrap().spectral_gap.is_infinite());
    }

    #[test]
    fn orthonormal_columns_have_unit_gap() {
        let m = Tensor::from_rows(&[vec![0.6, 0.0], vec![0.8, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = spectrum(&m).unwrap();
        assert!((r.spectral_gap - 1.0).abs() < 1e-14);
        assert_eq!(r.effective_rank, 2);
    }

    #[test]
    fn infinite_gap_survives_json() {
        let r = SpectrumReport {
            singular_values: vec![2.0, 0.0],
            spectral_gap: f64::INFINITY,
            effective_rank: 1,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<SpectrumReport>(&s).unwrap(), r);
    }

    #[test]
    fn non_finite_matrix_is_rejected() {
        let m = Tensor::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(svd_singular_values(&m).is_err());
    }

    #[test]
    fn fn_last_features_have_norm_sqrt_d() {
        let model = Model::build(NetworkSpec::mlp(4, &[6, 5], 3, NormMode::FnLast), 2).unwrap();
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let f = feature_matrix(&model, &x).unwrap();
        assert_eq!(f.shape(), &[5, 3]);
        let t = f.transpose().unwrap();
        for col in t.rows() {
            assert!((l2_norm(col) - 5f64.sqrt()).abs() < 1e-12);
        }
    }
}
