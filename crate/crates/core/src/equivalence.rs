//! Machine checks of the normalization reductions and expressive-power
//! transforms.
//!
//! Reduction checks evaluate two wirings of the same random parameters with
//! `ε = 0`. Trials whose forward pass hits a degenerate normalization input
//! (a zero vector under scale norm, a constant vector under MV norm) are
//! skipped and counted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BiasPolicy, LayerSpec, Model, NetworkSpec, NormMode, ParamKind};
use crate::rng::derive_seed;
use crate::tensor::{argmax, MomentumSgd, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_output_diff: f64,
    pub argmax_agreement_rate: f64,
    pub num_trials: usize,
    pub degenerate_skips: usize,
}

impl EquivalenceReport {
    /// Output agreement within `tol` and full argmax agreement.
    pub fn passes(&self, tol: f64) -> bool {
        self.num_trials > 0 && self.max_abs_output_diff <= tol && self.argmax_agreement_rate == 1.0
    }
}

/// Samples per trial in the reduction checks.
const TRIAL_BATCH: usize = 4;

/// Draws every trainable entry uniformly from `[-1, 1]`, biases included.
pub fn randomize_params(model: &mut Model, rng: &mut impl Rng) {
    for p in model.params_mut().iter_mut() {
        if p.kind.is_trainable() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-1.0..=1.0);
            }
        }
    }
}

/// Standard-normal batch matching the model's input shape.
pub fn random_inputs(model: &Model, rows: usize, rng: &mut impl Rng) -> Tensor {
    let width: usize = model.spec().input_shape.iter().product();
    let data = (0..rows * width).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, width], data).expect("shape matches data")
}

fn compare_wirings(spec: &NetworkSpec, a: NormMode, b: NormMode, seed: u64, trials: usize) -> Result<EquivalenceReport> {
    let base = spec.clone().with_epsilon(0.0);
    let mut left = Model::build_unchecked(base.clone().with_norm_mode(a), seed)?;
    let mut report = EquivalenceReport::default();
    let (mut agree, mut attempt) = (0usize, 0u64);
    let max_attempts = 20 * trials as u64 + 100;
    while report.num_trials < trials && attempt < max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt));
        attempt += 1;
        randomize_params(&mut left, &mut rng);
        let right = left.rewire(b)?;
        let x = random_inputs(&left, TRIAL_BATCH, &mut rng);
        let (la, lb) = match (left.forward(&x), right.forward(&x)) {
            (Ok((la, fa)), Ok((lb, fb))) => {
                report.max_abs_output_diff = report.max_abs_output_diff.max(fa.max_abs_diff(&fb));
                (la, lb)
            }
            (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => {
                report.degenerate_skips += 1;
                continue;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        report.max_abs_output_diff = report.max_abs_output_diff.max(la.max_abs_diff(&lb));
        agree += la.rows().zip(lb.rows()).filter(|(p, q)| argmax(p) == argmax(q)).count();
        report.num_trials += 1;
    }
    report.argmax_agreement_rate = if report.num_trials == 0 {
        0.0
    } else {
        agree as f64 / (report.num_trials * TRIAL_BATCH) as f64
    };
    Ok(report)
}

/// Layer-wise scale normalization against feature-only scale normalization
/// on `trials` random parameter draws. The network's own norm mode and ε are
/// ignored; its bias policy is honoured, so a spec with inner biases serves
/// as a counterexample search.
pub fn check_fn_reduction(spec: &NetworkSpec, seed: u64, trials: usize) -> Result<EquivalenceReport> {
    compare_wirings(spec, NormMode::FnLayerwise, NormMode::FnLast, seed, trials)
}

/// Layer-wise MV normalization against the shift-then-MV wiring.
pub fn check_ln_reduction(spec: &NetworkSpec, seed: u64, trials: usize) -> Result<EquivalenceReport> {
    compare_wirings(spec, NormMode::LnLayerwise, NormMode::LnReduced, seed, trials)
}

/// Argmax agreement between `model` (any wiring without its own
/// parameters) evaluated plainly and with a scale-normalized feature, over
/// `trials` random inputs, sharing all parameters. Inputs with a zero
/// feature are skipped.
pub fn check_fn_prediction_equivalence(model: &Model, trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let vanilla = model.rewire(NormMode::None)?;
    let normalized = model.rewire(NormMode::FnLast)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_inputs(&vanilla, trials, &mut rng);
    let (logits, features) = vanilla.forward(&x)?;
    let (logits_fn, _) = normalized.forward(&x)?;
    let mut report = EquivalenceReport::default();
    let mut agree = 0usize;
    for ((z, zf), g) in logits.rows().zip(logits_fn.rows()).zip(features.rows()) {
        if g.iter().all(|&v| v == 0.0) {
            report.degenerate_skips += 1;
            continue;
        }
        report.num_trials += 1;
        agree += usize::from(argmax(z) == argmax(zf));
    }
    report.argmax_agreement_rate = agree as f64 / report.num_trials.max(1) as f64;
    Ok(report)
}

/// Where MV normalization sits relative to the activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `ρ(n_MV(U a + b))`, built with [`NormMode::LnPre`].
    PreActivation,
    /// `n_MV(ρ(U a + b))`, built with [`NormMode::LnLayerwise`].
    PostActivation,
}

/// `P U` with `P = I − (1/d)𝟙𝟙ᵀ`: every column of `u` centered.
pub fn project_left(u: &Tensor) -> Result<Tensor> {
    let [rows, cols] = u.shape()[..] else {
        return Err(Error::shape("projection needs a matrix"));
    };
    let mut out = u.clone();
    for j in 0..cols {
        let mean = (0..rows).map(|i| u.data()[i * cols + j]).sum::<f64>() / rows as f64;
        for i in 0..rows {
            out.data_mut()[i * cols + j] -= mean;
        }
    }
    Ok(out)
}

/// `U P`: every row of `u` centered.
pub fn project_right(u: &Tensor) -> Result<Tensor> {
    if u.rank() != 2 {
        return Err(Error::shape("projection needs a matrix"));
    }
    let mut out = u.clone();
    let n = u.row_len();
    for row in out.data_mut().chunks_exact_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(out)
}

/// Builds a vanilla network whose predictions equal those of the layer
/// normalized `ln_model` on every input.
///
/// Pre-activation: `U'_i = P_i U_i`, `b'_i = P_i b_i`.
/// Post-activation: `U'_1 = U_1`, `b'_1 = b_1`, `U'_i = U_i P_{i−1}` for
/// `i ≥ 2`, and every class vector `w_c` replaced by `P_L w_c`.
///
/// Only dense networks without inner biases are supported.
pub fn ln_to_vanilla_transform(ln_model: &Model, placement: Placement) -> Result<Model> {
    let spec = ln_model.spec();
    let expected = match placement {
        Placement::PreActivation => NormMode::LnPre,
        Placement::PostActivation => NormMode::LnLayerwise,
    };
    if spec.norm_mode != expected {
        return Err(Error::invalid(format!(
            "{placement:?} transform needs a {expected} model, got {}",
            spec.norm_mode
        )));
    }
    if spec.bias_policy == BiasPolicy::AllBiases {
        return Err(Error::InvalidSpec("transform requires bias-free inner layers".into()));
    }
    if !spec.layers.iter().all(|l| matches!(l, LayerSpec::Dense { .. })) {
        return Err(Error::InvalidSpec("transform supports dense layers only".into()));
    }
    let mut out = ln_model.rewire(NormMode::None)?;
    let params = out.params_mut();
    let mut layer = 0;
    for i in 0..params.len() {
        let p = params.get(i);
        let value = match (p.kind, placement) {
            (ParamKind::Weight, Placement::PreActivation) => project_left(&p.value)?,
            (ParamKind::Bias, Placement::PreActivation) => {
                let b = p.value.clone().reshape(vec![p.value.len(), 1])?;
                project_left(&b)?.reshape(vec![p.value.len()])?
            }
            (ParamKind::Weight, Placement::PostActivation) if layer > 0 => project_right(&p.value)?,
            (ParamKind::Classifier, Placement::PostActivation) => project_right(&p.value)?,
            _ => p.value.clone(),
        };
        if p.kind == ParamKind::Weight {
            layer += 1;
        }
        *params.value_mut(i) = value;
    }
    Ok(out)
}

/// Argmax agreement of [`ln_to_vanilla_transform`] with its source model on
/// `inputs` random inputs.
pub fn check_ln_transform(ln_model: &Model, placement: Placement, inputs: usize, seed: u64) -> Result<EquivalenceReport> {
    let vanilla = ln_to_vanilla_transform(ln_model, placement)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_inputs(ln_model, inputs, &mut rng);
    let a = ln_model.predict(&x)?;
    let b = vanilla.predict(&x)?;
    let agree = a.iter().zip(&b).filter(|(p, q)| p == q).count();
    Ok(EquivalenceReport {
        max_abs_output_diff: 0.0,
        argmax_agreement_rate: agree as f64 / inputs as f64,
        num_trials: inputs,
        degenerate_skips: 0,
    })
}

/// Outcome of [`optimal_error_ordering_check`]. This is empirical evidence
/// about optimal errors, not a proof: finite training only approaches the
/// infimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub vanilla_error: f64,
    pub fn_error: f64,
    pub ln_error: f64,
    /// Per model, whether the training loss plateaued.
    pub converged: [bool; 3],
    pub heuristic: bool,
    /// `|ε̂ − ε̂_F| ≤ tol` and `ε̂ ≤ ε̂_L + tol`.
    pub ordering_holds: bool,
}

/// Trains vanilla, feature-normalized and layer-normalized copies of a small
/// MLP full-batch on `(x, labels)` and compares their training errors.
pub fn optimal_error_ordering_check(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    hidden: &[usize],
    steps: usize,
    seed: u64,
) -> Result<OrderingReport> {
    if x.batch() > 200 {
        return Err(Error::invalid("ordering check is meant for at most 200 points"));
    }
    let mut errors = [0.0; 3];
    let mut converged = [false; 3];
    for (slot, mode) in [NormMode::None, NormMode::FnLast, NormMode::LnLayerwise].into_iter().enumerate() {
        let spec = NetworkSpec::mlp(x.row_len(), hidden, classes, mode);
        let mut model = Model::build(spec, seed)?;
        let mut opt = MomentumSgd::new(0.9);
        let mut history = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (loss, grads, _) = model.loss_and_grad(x, labels, true)?;
            history.push(loss);
            let mut ps = model.params().tensors();
            opt.step(&mut ps, &grads.tensors(), 0.05)?;
            for (i, t) in ps.into_iter().enumerate() {
                *model.params_mut().value_mut(i) = t;
            }
        }
        let tail = steps / 10;
        converged[slot] = steps >= 20 && {
            let (a, b) = (history[steps - 1 - tail], history[steps - 1]);
            (a - b).abs() <= 1e-3 * a.abs().max(1e-3)
        };
        let pred = model.predict(x)?;
        errors[slot] = pred.iter().zip(labels).filter(|(p, y)| p != y).count() as f64 / labels.len() as f64;
    }
    let tol = 0.02;
    Ok(OrderingReport {
        vanilla_error: errors[0],
        fn_error: errors[1],
        ln_error: errors[2],
        converged,
        heuristic: true,
        ordering_holds: (errors[0] - errors[1]).abs() <= tol && errors[0] <= errors[2] + tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_reductions_are_identities() {
        let spec = NetworkSpec::mlp(5, &[6], 3, NormMode::None);
        let r = check_fn_reduction(&spec, 1, 20).unwrap();
        assert_eq!(r.max_abs_output_diff, 0.0);
        let r = check_ln_reduction(&spec, 1, 20).unwrap();
        assert_eq!(r.max_abs_output_diff, 0.0);
    }

    #[test]
    fn projections_are_idempotent() {
        let u = Tensor::new(vec![2, 3], vec![1.0, 2.0, 4.0, -1.0, 0.5, 3.0]).unwrap();
        let once = project_left(&u).unwrap();
        assert!(project_left(&once).unwrap().max_abs_diff(&once) < 1e-15);
        let once = project_right(&u).unwrap();
        assert!(project_right(&once).unwrap().max_abs_diff(&once) < 1e-15);
    }

    #[test]
    fn placement_mismatch_is_rejected() {
        let m = Model::build(NetworkSpec::mlp(4, &[4], 2, NormMode::LnPre), 0).unwrap();
        assert!(ln_to_vanilla_transform(&m, Placement::PostActivation).is_err());
    }
}
