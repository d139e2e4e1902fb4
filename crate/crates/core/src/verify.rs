//! Verification suites: gradient checks of every differentiable primitive,
//! positive homogeneity, and the reduction and expressive-power checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::equivalence::{
    check_fn_prediction_equivalence, check_fn_reduction, check_ln_reduction, check_ln_transform, randomize_params,
    random_inputs, EquivalenceReport, Placement,
};
use crate::error::{Error, Result};
use crate::model::{residual_block, BiasPolicy, BlockWeights, Model, NetworkSpec, NormMode, ResidualVariant};
use crate::norm::DEFAULT_EPSILON;
use crate::rng::derive_seed;
use crate::tensor::{finite_diff_check, Activation, BranchSignature, FdOptions, FdReport, Tape, Tensor, Var};

/// Relative-error bound of the gradient suite.
pub const GRADIENT_TOL: f64 = 1e-4;
/// Absolute output bound of the reduction checks.
pub const REDUCTION_TOL: f64 = 1e-9;
/// Relative bound of the homogeneity checks.
pub const HOMOGENEITY_TOL: f64 = 1e-9;
/// Instances whose smallest normalization scale (see
/// [`Tape::min_norm_scale`]) falls below this are redrawn: at step `1e-4`
/// the difference quotient cannot resolve such sharp curvature.
pub const CONDITION_FLOOR: f64 = 0.05;
/// Output difference that counts as a counterexample.
pub const WITNESS_GAP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    FnReduction,
    LnReduction,
    Agreement,
    Gradients,
    Homogeneity,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fn_reduction" => Suite::FnReduction,
            "ln_reduction" => Suite::LnReduction,
            "prop3" | "agreement" => Suite::Agreement,
            "gradients" => Suite::Gradients,
            "homogeneity" => Suite::Homogeneity,
            "all" => Suite::All,
            other => return Err(Error::invalid(format!("unknown suite {other:?}"))),
        })
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Serialize) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: serde_json::to_value(detail).unwrap_or(serde_json::Value::Null),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Give the reduction networks inner biases; the checks are then
    /// expected to fail with a counterexample.
    pub inject_bias: bool,
    pub reduction_trials: usize,
    pub agreement_trials: usize,
    pub gradient_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            inject_bias: false,
            reduction_trials: 100,
            agreement_trials: 1000,
            gradient_instances: 4,
        }
    }
}

/// The three-hidden-layer network the reduction checks run on.
pub fn reduction_network(inject_bias: bool) -> NetworkSpec {
    let spec = NetworkSpec::mlp(784, &[128, 64, 384], 10, NormMode::None).with_bias_policy(BiasPolicy::None);
    if inject_bias {
        spec.with_bias_policy(BiasPolicy::AllBiases)
    } else {
        spec
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::FnReduction {
        let r = check_fn_reduction(&reduction_network(opts.inject_bias), opts.seed, opts.reduction_trials)?;
        out.push(CheckOutcome::new("fn_reduction", r.passes(REDUCTION_TOL), r));
    }
    if all || suite == Suite::LnReduction {
        let r = check_ln_reduction(&reduction_network(opts.inject_bias), opts.seed, opts.reduction_trials)?;
        out.push(CheckOutcome::new("ln_reduction", r.passes(REDUCTION_TOL), r));
    }
    if all || suite == Suite::Agreement {
        let r = fn_argmax_agreement(opts.seed, opts.agreement_trials)?;
        out.push(CheckOutcome::new("fn_argmax_agreement", r.argmax_agreement_rate == 1.0, r));
        for placement in [Placement::PreActivation, Placement::PostActivation] {
            let r = ln_transform_agreement(placement, opts.seed, opts.agreement_trials)?;
            let name = match placement {
                Placement::PreActivation => "ln_transform_pre_activation",
                Placement::PostActivation => "ln_transform_post_activation",
            };
            out.push(CheckOutcome::new(name, r.argmax_agreement_rate == 1.0, r));
        }
    }
    if all || suite == Suite::Homogeneity {
        let h = activation_homogeneity(100, opts.seed);
        out.push(CheckOutcome::new("activation_homogeneity", h < HOMOGENEITY_TOL, h));
        let e = network_scale_equivariance(100, opts.seed)?;
        out.push(CheckOutcome::new("network_scale_equivariance", e < HOMOGENEITY_TOL, e));
    }
    if all || suite == Suite::Gradients {
        let cases = gradient_suite(opts.seed, opts.gradient_instances)?;
        let instances: usize = cases.iter().map(|c| c.instances).sum();
        let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        out.push(CheckOutcome::new(
            "gradients",
            worst < GRADIENT_TOL,
            serde_json::json!({ "instances": instances, "max_rel_err": worst, "cases": cases }),
        ));
    }
    Ok(out)
}

/// Vanilla vs feature-normalized argmax over `trials` inputs, spread over
/// ten random parameter draws of a small bias-free MLP.
pub fn fn_argmax_agreement(seed: u64, trials: usize) -> Result<EquivalenceReport> {
    let draws = 10usize;
    let mut total = EquivalenceReport::default();
    let mut agree = 0.0;
    for d in 0..draws {
        let per = trials / draws + usize::from(d < trials % draws);
        if per == 0 {
            continue;
        }
        let mut model = Model::build(NetworkSpec::mlp(16, &[32, 32, 24], 10, NormMode::None), derive_seed(seed, d as u64))?;
        randomize_params(&mut model, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 100 + d as u64)));
        let r = check_fn_prediction_equivalence(&model, per, derive_seed(seed, 200 + d as u64))?;
        agree += r.argmax_agreement_rate * r.num_trials as f64;
        total.num_trials += r.num_trials;
        total.degenerate_skips += r.degenerate_skips;
    }
    total.argmax_agreement_rate = agree / total.num_trials.max(1) as f64;
    Ok(total)
}

/// LN network with random parameters against its vanilla transform.
pub fn ln_transform_agreement(placement: Placement, seed: u64, inputs: usize) -> Result<EquivalenceReport> {
    let mode = match placement {
        Placement::PreActivation => NormMode::LnPre,
        Placement::PostActivation => NormMode::LnLayerwise,
    };
    let mut model = Model::build(NetworkSpec::mlp(16, &[32, 32, 24], 10, mode), seed)?;
    randomize_params(&mut model, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)));
    check_ln_transform(&model, placement, inputs, derive_seed(seed, 2))
}

/// Largest relative error of `ρ(λt) = λρ(t)` over random `t` and
/// `λ ∈ (0, 10]`, for ReLU and a leaky ReLU.
pub fn activation_homogeneity(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let acts = [Activation::Relu, Activation::LeakyRelu { pos: 1.0, neg: 0.1 }];
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let t: f64 = rng.sample::<f64, _>(StandardNormal) * 10.0;
        let lambda: f64 = 10.0 * (1.0 - rng.random::<f64>());
        for act in acts {
            let (lhs, rhs) = (act.apply(lambda * t), lambda * act.apply(t));
            worst = worst.max(rel_err(lhs, rhs));
        }
    }
    worst
}

/// `h(λa) = λh(a)` for bias-free networks with `λ ∈ (0, 100]`: the layers
/// after the first, fed a random post-activation vector `a`.
pub fn network_scale_equivariance(trials: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let s = derive_seed(seed, trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let act = if trial % 2 == 0 {
            Activation::Relu
        } else {
            Activation::LeakyRelu { pos: 1.0, neg: 0.2 }
        };
        let spec = NetworkSpec::mlp(24, &[32, 16], 10, NormMode::None)
            .with_bias_policy(BiasPolicy::None)
            .with_activation(act);
        let mut model = Model::build(spec, s)?;
        randomize_params(&mut model, &mut rng);
        let a = random_inputs(&model, 1, &mut rng).map(|v| v.abs());
        let lambda: f64 = 100.0 * (1.0 - rng.random::<f64>());
        let (za, _) = model.forward(&a)?;
        let (zl, _) = model.forward(&a.map(|v| lambda * v))?;
        for (x, y) in za.data().iter().zip(zl.data()) {
            worst = worst.max(rel_err(lambda * x, *y));
        }
    }
    Ok(worst)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Finite-difference result for one primitive or model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub kinks_excluded: usize,
    /// Draws rejected for falling below [`CONDITION_FLOOR`].
    pub ill_conditioned: usize,
    pub max_rel_err: f64,
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Reduces any output to a scalar by `½ Σ_b (r · y_b)²` with a fixed random
/// `r`, so no output direction is left unexercised.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let rows = if shape.len() >= 2 { shape[0] } else { 1 };
    let width = shape.iter().product::<usize>() / rows;
    let flat = tape.reshape(y, vec![rows, width])?;
    let r = randn(&mut ChaCha8Rng::seed_from_u64(seed), &[1, width], 1.0);
    let r = tape.leaf(r)?;
    let z = tape.affine(flat, r, None)?;
    tape.half_sum_squares(z)
}

fn check_case(params: &[Tensor], build: &Build, seed: u64, opts: &FdOptions) -> Result<Option<FdReport>> {
    let eval = |ps: &[Tensor], grads: bool| -> Result<(f64, BranchSignature, Vec<Tensor>, f64)> {
        let mut tape = Tape::new();
        let vars = ps.iter().map(|p| tape.leaf(p.clone())).collect::<Result<Vec<_>>>()?;
        let y = build(&mut tape, &vars)?;
        let loss = project(&mut tape, y, seed)?;
        let value = tape.value(loss).item();
        let sig = tape.branch_signature();
        let scale = tape.min_norm_scale();
        let mut g = Vec::new();
        if grads {
            let mut gr = tape.backward(loss)?;
            for (v, p) in vars.iter().zip(ps) {
                g.push(gr.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())));
            }
        }
        Ok((value, sig, g, scale))
    };
    let (_, _, analytic, scale) = eval(params, true)?;
    if scale < CONDITION_FLOOR {
        return Ok(None);
    }
    finite_diff_check(params, &analytic, |ps| eval(ps, false).map(|(v, s, _, _)| (v, s)), opts).map(Some)
}

fn model_case(model: &Model, x: &Tensor, labels: &[usize], opts: &FdOptions) -> Result<Option<FdReport>> {
    let mut tape = Tape::new();
    model.record(&mut tape, x, true)?;
    if tape.min_norm_scale() < CONDITION_FLOOR {
        return Ok(None);
    }
    let (_, grads, _) = model.loss_and_grad(x, labels, true)?;
    let params = model.params().tensors();
    let analytic = grads.tensors();
    finite_diff_check(
        &params,
        &analytic,
        |ps| {
            let mut m = model.clone();
            for (i, p) in ps.iter().enumerate() {
                *m.params_mut().value_mut(i) = p.clone();
            }
            let mut tape = Tape::new();
            let rec = m.record(&mut tape, x, true)?;
            let loss = tape.cross_entropy(rec.logits, labels, None)?;
            Ok((tape.value(loss).item(), tape.branch_signature()))
        },
        opts,
    )
    .map(Some)
}

/// Runs `instances` seeded draws of every differentiable primitive, every
/// residual block variant and every network wiring against central
/// differences.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<GradCase>> {
    let relu = Activation::Relu;
    let leaky = Activation::LeakyRelu { pos: 1.0, neg: 0.1 };
    let eps = DEFAULT_EPSILON;
    let mut primitives: Vec<(&str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>, Box<Build>)> = Vec::new();
    primitives.push((
        "affine",
        Box::new(|r| vec![randn(r, &[3, 5], 1.0), randn(r, &[4, 5], 1.0), randn(r, &[4], 1.0)]),
        Box::new(|t, v| t.affine(v[0], v[1], Some(v[2]))),
    ));
    primitives.push((
        "relu",
        Box::new(|r| vec![randn(r, &[3, 6], 1.0)]),
        Box::new(move |t, v| t.activation(v[0], relu)),
    ));
    primitives.push((
        "leaky_relu",
        Box::new(|r| vec![randn(r, &[3, 6], 1.0)]),
        Box::new(move |t, v| t.activation(v[0], leaky)),
    ));
    primitives.push((
        "conv2d",
        Box::new(|r| vec![randn(r, &[2, 2, 6, 6], 1.0), randn(r, &[3, 2, 3, 3], 0.5), randn(r, &[3], 1.0)]),
        Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1)),
    ));
    primitives.push((
        "conv2d_stride2",
        Box::new(|r| vec![randn(r, &[2, 1, 7, 7], 1.0), randn(r, &[2, 1, 3, 3], 0.5)]),
        Box::new(|t, v| t.conv2d(v[0], v[1], None, 2)),
    ));
    primitives.push((
        "maxpool2d",
        Box::new(|r| vec![randn(r, &[2, 2, 4, 4], 1.0)]),
        Box::new(|t, v| t.maxpool2d(v[0], 2, 2)),
    ));
    primitives.push((
        "mv_norm",
        Box::new(|r| vec![randn(r, &[3, 8], 1.0)]),
        Box::new(move |t, v| t.mv_norm(v[0], 1, eps)),
    ));
    primitives.push((
        "group_norm",
        Box::new(|r| vec![randn(r, &[3, 8], 1.0)]),
        Box::new(move |t, v| t.mv_norm(v[0], 2, eps)),
    ));
    primitives.push((
        "scale_norm",
        Box::new(|r| vec![randn(r, &[3, 8], 1.0)]),
        Box::new(move |t, v| t.scale_norm(v[0], eps)),
    ));
    primitives.push((
        "mean_shift",
        Box::new(|r| vec![randn(r, &[3, 8], 1.0)]),
        Box::new(|t, v| t.shift(v[0])),
    ));
    primitives.push((
        "mv_learnable",
        Box::new(|r| vec![randn(r, &[3, 6], 1.0), randn(r, &[6], 1.0), randn(r, &[6], 1.0)]),
        Box::new(move |t, v| {
            let n = t.mv_norm(v[0], 1, eps)?;
            t.element_affine(n, v[1], v[2], 1)
        }),
    ));
    primitives.push((
        "channel_affine",
        Box::new(|r| vec![randn(r, &[2, 12], 1.0), randn(r, &[3], 1.0), randn(r, &[3], 1.0)]),
        Box::new(|t, v| t.element_affine(v[0], v[1], v[2], 4)),
    ));
    primitives.push((
        "batch_norm",
        Box::new(|r| vec![randn(r, &[5, 4], 1.0)]),
        Box::new(move |t, v| Ok(t.batch_norm(v[0], 4, 1, eps, true, (&[0.0; 4], &[1.0; 4]))?.0)),
    ));
    primitives.push((
        "batch_norm_spatial",
        Box::new(|r| vec![randn(r, &[3, 2, 2, 2], 1.0)]),
        Box::new(move |t, v| Ok(t.batch_norm(v[0], 2, 4, eps, true, (&[0.0; 2], &[1.0; 2]))?.0)),
    ));
    primitives.push((
        "column_scale",
        Box::new(|r| vec![randn(r, &[3, 4], 1.0)]),
        Box::new(|t, v| t.column_scale(v[0], vec![1.0, 0.5, 0.25, 2.0])),
    ));
    primitives.push((
        "cross_entropy",
        Box::new(|r| vec![randn(r, &[4, 5], 2.0)]),
        Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 4, 3], None)),
    ));
    primitives.push((
        "cross_entropy_offsets",
        Box::new(|r| vec![randn(r, &[4, 5], 2.0)]),
        Box::new(|t, v| t.cross_entropy(v[0], &[1, 1, 2, 0], Some(&[-1.0, -0.5, -0.3, -2.0, -1.2]))),
    ));
    primitives.push((
        "decorrelation",
        Box::new(|r| vec![randn(r, &[6, 4], 1.0)]),
        Box::new(move |t, v| t.decorrelation(v[0], eps)),
    ));
    primitives.push((
        "half_sum_squares",
        Box::new(|r| vec![randn(r, &[3, 3], 1.0)]),
        Box::new(|t, v| t.half_sum_squares(v[0])),
    ));
    for (name, variant) in [
        ("residual_plain", ResidualVariant::Plain),
        ("residual_ln_inner", ResidualVariant::LnInner),
        ("residual_ln_shift", ResidualVariant::LnShift),
        ("residual_fn_inner_mv", ResidualVariant::FnInnerMv),
        ("residual_fn_inner_scale", ResidualVariant::FnInnerScale),
    ] {
        primitives.push((
            name,
            Box::new(|r| {
                vec![
                    randn(r, &[3, 6], 1.0),
                    randn(r, &[6, 6], 0.5),
                    randn(r, &[6], 0.5),
                    randn(r, &[6, 6], 0.5),
                ]
            }),
            Box::new(move |t, v| {
                let w = BlockWeights {
                    a1: v[1],
                    b1: Some(v[2]),
                    a2: v[3],
                    b2: None,
                };
                residual_block(t, v[0], &w, variant, relu, eps, false)
            }),
        ));
    }
    primitives.push((
        "residual_pre_mv",
        Box::new(|r| vec![randn(r, &[3, 6], 1.0), randn(r, &[6, 6], 0.5), randn(r, &[6, 6], 0.5)]),
        Box::new(move |t, v| {
            let w = BlockWeights {
                a1: v[1],
                b1: None,
                a2: v[2],
                b2: None,
            };
            residual_block(t, v[0], &w, ResidualVariant::Plain, relu, eps, true)
        }),
    ));

    let opts = FdOptions::default();
    let mut cases = Vec::new();
    for (k, (name, make, build)) in primitives.iter().enumerate() {
        let mut case = GradCase::new(name);
        let mut draw = 0u64;
        while case.instances < instances {
            let s = derive_seed(derive_seed(seed, k as u64), draw);
            draw += 1;
            let params = make(&mut ChaCha8Rng::seed_from_u64(s));
            case.absorb(check_case(&params, build.as_ref(), s, &opts)?)?;
        }
        cases.push(case);
    }

    let mut networks: Vec<(String, NetworkSpec)> = [
        NormMode::None,
        NormMode::FnLayerwise,
        NormMode::FnLast,
        NormMode::LnLayerwise,
        NormMode::LnReduced,
        NormMode::LnPre,
        NormMode::LnLearnable,
        NormMode::Gn { groups: 2 },
        NormMode::Bn,
    ]
    .into_iter()
    .map(|m| (format!("mlp_{m}"), NetworkSpec::mlp(5, &[6, 6, 4], 3, m)))
    .collect();
    networks.push((
        "mlp_residual".into(),
        NetworkSpec::residual_mlp(5, 6, 2, ResidualVariant::LnShift, 3, NormMode::LnReduced),
    ));
    for m in [NormMode::None, NormMode::LnLayerwise, NormMode::Bn] {
        networks.push((format!("cnn_{m}"), NetworkSpec::cnn_sized([1, 16, 16], 2, 5, 3, m)));
    }
    let sampled = FdOptions {
        max_coords: Some(60),
        ..FdOptions::default()
    };
    for (k, (name, spec)) in networks.iter().enumerate() {
        let mut case = GradCase::new(name);
        let mut draw = 0u64;
        while case.instances < instances {
            let s = derive_seed(derive_seed(seed, 1000 + k as u64), draw);
            draw += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut model = Model::build(spec.clone(), s)?;
            randomize_params(&mut model, &mut rng);
            let x = random_inputs(&model, 4, &mut rng);
            let x = x.reshape(std::iter::once(4).chain(spec.input_shape.iter().copied()).collect())?;
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..spec.classes)).collect();
            case.absorb(model_case(&model, &x, &labels, &FdOptions { seed: s, ..sampled.clone() })?)?;
        }
        cases.push(case);
    }
    Ok(cases)
}

/// The full-size convolutional network on a two-image batch, with sampled
/// coordinates in every parameter tensor.
pub fn full_cnn_gradient_check(seed: u64, coords: usize) -> Result<GradCase> {
    let spec = NetworkSpec::cnn(10, NormMode::None);
    let model = Model::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_inputs(&model, 2, &mut rng).reshape(vec![2, 3, 32, 32])?;
    let opts = FdOptions {
        max_coords: Some(coords),
        seed,
        ..FdOptions::default()
    };
    let mut case = GradCase::new("cnn_full");
    case.absorb(model_case(&model, &x, &[3, 7], &opts)?)?;
    Ok(case)
}

/// Consecutive rejected draws after which a case is abandoned.
const MAX_REJECTS: usize = 1000;

impl GradCase {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            checked: 0,
            kinks_excluded: 0,
            ill_conditioned: 0,
            max_rel_err: 0.0,
        }
    }

    fn absorb(&mut self, r: Option<FdReport>) -> Result<()> {
        match r {
            Some(r) => {
                self.instances += 1;
                self.checked += r.checked;
                self.kinks_excluded += r.kinks_excluded;
                self.max_rel_err = self.max_rel_err.max(r.max_rel_err);
            }
            None => {
                self.ill_conditioned += 1;
                if self.ill_conditioned > MAX_REJECTS {
                    return Err(Error::Degenerate(format!("{}: no well-conditioned instance found", self.name)));
                }
            }
        }
        Ok(())
    }
}
