//! Network builders over the tensor and normalization primitives.

mod checkpoint;
mod params;
mod spec;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use params::{Param, ParamKind, ParamSet};
pub use spec::{BiasPolicy, LayerSpec, NetworkSpec, NormMode, ResidualVariant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::norm::BatchStats;
use crate::tensor::{argmax, Activation, Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
enum PostNorm {
    None,
    Scale,
    Mv,
    Shift,
    MvAffine {
        gamma: usize,
        beta: usize,
    },
    Group(usize),
    Batch {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
        channels: usize,
        spatial: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Dense {
        w: usize,
        b: Option<usize>,
        pre_mv: bool,
        post: PostNorm,
    },
    Conv {
        k: usize,
        b: Option<usize>,
        stride: usize,
        pre_mv: bool,
        post: PostNorm,
    },
    Pool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Residual {
        a1: usize,
        b1: Option<usize>,
        a2: usize,
        b2: Option<usize>,
        variant: ResidualVariant,
        pre_mv: bool,
        post: PostNorm,
    },
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: usize,
    pub var: usize,
    pub stats: BatchStats,
}

/// Handles into a tape after [`Model::record`].
pub struct Recorded {
    pub logits: Var,
    pub features: Var,
    /// One leaf per entry of the parameter set, in order.
    pub params: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// A network: spec, parameters, and the wiring derived from the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: NetworkSpec,
    params: ParamSet,
    stages: Vec<Stage>,
    classifier: usize,
    feature_dim: usize,
}

impl Model {
    /// Builds a seeded model, enforcing the bias requirement of the
    /// reducible normalization modes.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Model> {
        spec.validate_assumption_one()?;
        Self::build_unchecked(spec, seed)
    }

    /// [`Model::build`] without the bias-policy check; used to search for
    /// counterexamples when the assumption is violated.
    pub fn build_unchecked(spec: NetworkSpec, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut stages = Vec::with_capacity(spec.layers.len());
        let mut shape = spec.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidSpec("input shape must be non-empty and positive".into()));
        }
        if spec.classes < 2 {
            return Err(Error::InvalidSpec("at least two classes are required".into()));
        }
        let hidden_total = spec.hidden_count();
        if hidden_total == 0 {
            return Err(Error::InvalidSpec("network needs at least one hidden layer".into()));
        }
        let pre_mv = spec.norm_mode == NormMode::LnPre;
        let mut hidden = 0;
        for (li, layer) in spec.layers.iter().enumerate() {
            let name = |s: &str| format!("layer{li}.{s}");
            let first = hidden == 0;
            let bias_here = match spec.bias_policy {
                BiasPolicy::AllBiases => true,
                BiasPolicy::FirstLayerOnly => first,
                BiasPolicy::None => false,
            };
            match *layer {
                LayerSpec::Dense { d_in, d_out } => {
                    let flat: usize = shape.iter().product();
                    if flat != d_in || d_out == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {li}: dense expects width {d_in}, input has {flat}"
                        )));
                    }
                    let w = params.push(name("weight"), ParamKind::Weight, false, uniform(&mut rng, &[d_out, d_in], d_in));
                    let b = bias_here
                        .then(|| params.push(name("bias"), ParamKind::Bias, false, Tensor::zeros(&[d_out])));
                    shape = vec![d_out];
                    hidden += 1;
                    let post = post_norm(&spec, &mut params, li, &shape, hidden == hidden_total)?;
                    stages.push(Stage::Dense { w, b, pre_mv, post });
                }
                LayerSpec::Conv {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::InvalidSpec(format!(
                            "layer {li}: convolution needs a [C, H, W] input, got {shape:?}"
                        )));
                    };
                    if c != c_in || kernel == 0 || kernel > h || kernel > w || stride == 0 || c_out == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {li}: convolution {c_in}->{c_out} k{kernel} s{stride} does not fit {shape:?}"
                        )));
                    }
                    let fan_in = c_in * kernel * kernel;
                    let k = params.push(
                        name("weight"),
                        ParamKind::Weight,
                        false,
                        uniform(&mut rng, &[c_out, c_in, kernel, kernel], fan_in),
                    );
                    let b = bias_here
                        .then(|| params.push(name("bias"), ParamKind::Bias, false, Tensor::zeros(&[c_out])));
                    shape = vec![c_out, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                    hidden += 1;
                    let post = post_norm(&spec, &mut params, li, &shape, hidden == hidden_total)?;
                    stages.push(Stage::Conv {
                        k,
                        b,
                        stride,
                        pre_mv,
                        post,
                    });
                }
                LayerSpec::MaxPool { window, stride } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::InvalidSpec(format!(
                            "layer {li}: pooling needs a [C, H, W] input"
                        )));
                    };
                    if window == 0 || stride == 0 || window > h || window > w {
                        return Err(Error::InvalidSpec(format!(
                            "layer {li}: pool window {window} does not fit {shape:?}"
                        )));
                    }
                    shape = vec![c, (h - window) / stride + 1, (w - window) / stride + 1];
                    stages.push(Stage::Pool { window, stride });
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    stages.push(Stage::Flatten);
                }
                LayerSpec::Residual { dim, variant } => {
                    let flat: usize = shape.iter().product();
                    if flat != dim {
                        return Err(Error::InvalidSpec(format!(
                            "layer {li}: residual block of width {dim} on input of width {flat}"
                        )));
                    }
                    let inner_bias = spec.bias_policy == BiasPolicy::AllBiases;
                    let a1 = params.push(name("a1.weight"), ParamKind::Weight, false, uniform(&mut rng, &[dim, dim], dim));
                    let b1 = inner_bias
                        .then(|| params.push(name("a1.bias"), ParamKind::Bias, false, Tensor::zeros(&[dim])));
                    let a2 = params.push(name("a2.weight"), ParamKind::Weight, false, uniform(&mut rng, &[dim, dim], dim));
                    let b2 = inner_bias
                        .then(|| params.push(name("a2.bias"), ParamKind::Bias, false, Tensor::zeros(&[dim])));
                    shape = vec![dim];
                    hidden += 1;
                    let post = post_norm(&spec, &mut params, li, &shape, hidden == hidden_total)?;
                    stages.push(Stage::Residual {
                        a1,
                        b1,
                        a2,
                        b2,
                        variant,
                        pre_mv,
                        post,
                    });
                }
            }
        }
        let feature_dim: usize = shape.iter().product();
        let classifier = params.push(
            "classifier.weight".into(),
            ParamKind::Classifier,
            false,
            uniform(&mut rng, &[spec.classes, feature_dim], feature_dim),
        );
        Ok(Model {
            spec,
            params,
            stages,
            classifier,
            feature_dim,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameters; the layout must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::shape("parameter layout does not match the model"));
        }
        self.params = params;
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Index of the classifier matrix `W` in the parameter set.
    pub fn classifier_index(&self) -> usize {
        self.classifier
    }

    pub fn classifier(&self) -> &Tensor {
        self.params.value(self.classifier)
    }

    /// Same parameters under another wiring. Fails when the new mode needs a
    /// different parameter layout.
    pub fn rewire(&self, mode: NormMode) -> Result<Model> {
        let spec = self.spec.clone().with_norm_mode(mode);
        let mut out = Self::build_unchecked(spec, 0)?;
        out.set_params(self.params.clone())?;
        Ok(out)
    }

    /// Same parameters and wiring with another stabilizer `ε`.
    pub fn with_epsilon(&self, epsilon: f64) -> Model {
        let mut out = self.clone();
        out.spec.epsilon = epsilon;
        out
    }

    /// Records the forward pass of a batch `x: [B, …]` on `tape`.
    pub fn record(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Recorded> {
        let per_sample: usize = self.spec.input_shape.iter().product();
        if x.rank() < 2 || x.row_len() != per_sample {
            return Err(Error::shape(format!(
                "input {:?} does not match per-sample shape {:?}",
                x.shape(),
                self.spec.input_shape
            )));
        }
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.spec.input_shape);
        let mut cur = tape.leaf(x.clone().reshape(shape)?)?;
        let mut pvars = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            pvars.push(tape.leaf(p.value.clone())?);
        }
        let eps = self.spec.epsilon;
        let act = self.spec.activation;
        let mut bn_updates = Vec::new();
        let mut ctx = PostCtx {
            pvars: &pvars,
            params: &self.params,
            eps,
            training,
            bn_updates: &mut bn_updates,
        };
        for stage in &self.stages {
            cur = match stage {
                Stage::Dense { w, b, pre_mv, post } => {
                    let z = tape.affine(cur, pvars[*w], b.map(|b| pvars[b]))?;
                    let h = activate(tape, z, act, *pre_mv, eps)?;
                    ctx.apply(tape, h, post)?
                }
                Stage::Conv {
                    k,
                    b,
                    stride,
                    pre_mv,
                    post,
                } => {
                    let z = tape.conv2d(cur, pvars[*k], b.map(|b| pvars[b]), *stride)?;
                    let h = activate(tape, z, act, *pre_mv, eps)?;
                    ctx.apply(tape, h, post)?
                }
                Stage::Pool { window, stride } => tape.maxpool2d(cur, *window, *stride)?,
                Stage::Flatten => tape.flatten(cur)?,
                Stage::Residual {
                    a1,
                    b1,
                    a2,
                    b2,
                    variant,
                    pre_mv,
                    post,
                } => {
                    let x2 = if tape.value(cur).rank() == 2 {
                        cur
                    } else {
                        tape.flatten(cur)?
                    };
                    let weights = BlockWeights {
                        a1: pvars[*a1],
                        b1: b1.map(|b| pvars[b]),
                        a2: pvars[*a2],
                        b2: b2.map(|b| pvars[b]),
                    };
                    let h = residual_block(tape, x2, &weights, *variant, act, eps, *pre_mv)?;
                    ctx.apply(tape, h, post)?
                }
            };
        }
        let features = if tape.value(cur).rank() == 2 {
            cur
        } else {
            tape.flatten(cur)?
        };
        let logits = tape.affine(features, pvars[self.classifier], None)?;
        Ok(Recorded {
            logits,
            features,
            params: pvars,
            bn_updates,
        })
    }

    /// Evaluation-mode forward pass: `(logits [B, C], features [B, d_L])`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.forward_mode(x, false)
    }

    pub fn forward_mode(&self, x: &Tensor, training: bool) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x, training)?;
        Ok((tape.value(rec.logits).clone(), tape.value(rec.features).clone()))
    }

    /// Argmax predictions with lowest-index tie-breaking.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (logits, _) = self.forward(x)?;
        Ok(logits.rows().map(argmax).collect())
    }

    /// Gradients laid out like the parameter set; non-trainable entries and
    /// parameters not reached from the loss get zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, rec: &Recorded) -> ParamSet {
        let mut out = self.params.zeros_like();
        for (i, v) in rec.params.iter().enumerate() {
            if !self.params.get(i).kind.is_trainable() {
                continue;
            }
            if let Some(g) = grads.take(*v) {
                *out.value_mut(i) = g;
            }
        }
        out
    }

    /// Mean cross-entropy on a batch and its gradient.
    pub fn loss_and_grad(&self, x: &Tensor, labels: &[usize], training: bool) -> Result<(f64, ParamSet, Vec<BnUpdate>)> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, x, training)?;
        let loss = tape.cross_entropy(rec.logits, labels, None)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let g = self.collect_grads(&mut grads, &rec);
        Ok((value, g, rec.bn_updates))
    }

    /// Folds batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.spec.bn_momentum;
        for u in updates {
            for (r, b) in self.params.value_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.params.value_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn post_norm(
    spec: &NetworkSpec,
    params: &mut ParamSet,
    li: usize,
    shape: &[usize],
    last: bool,
) -> Result<PostNorm> {
    let width: usize = shape.iter().product();
    let (channels, spatial) = match shape {
        [c, h, w] => (*c, h * w),
        _ => (width, 1),
    };
    Ok(match spec.norm_mode {
        NormMode::None | NormMode::LnPre => PostNorm::None,
        NormMode::FnLayerwise => PostNorm::Scale,
        NormMode::FnLast => {
            if last {
                PostNorm::Scale
            } else {
                PostNorm::None
            }
        }
        NormMode::LnLayerwise => PostNorm::Mv,
        NormMode::LnReduced => {
            if last {
                PostNorm::Mv
            } else {
                PostNorm::Shift
            }
        }
        NormMode::LnLearnable => PostNorm::MvAffine {
            gamma: params.push(format!("layer{li}.gamma"), ParamKind::Gamma, false, Tensor::full(&[width], 1.0)),
            beta: params.push(format!("layer{li}.beta"), ParamKind::Beta, false, Tensor::zeros(&[width])),
        },
        NormMode::Gn { groups } => {
            if groups == 0 || channels % groups != 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer {li}: {groups} groups do not divide {channels} channels"
                )));
            }
            PostNorm::Group(groups)
        }
        NormMode::Bn => PostNorm::Batch {
            gamma: params.push(format!("layer{li}.bn.gamma"), ParamKind::Gamma, true, Tensor::full(&[channels], 1.0)),
            beta: params.push(format!("layer{li}.bn.beta"), ParamKind::Beta, true, Tensor::zeros(&[channels])),
            mean: params.push(
                format!("layer{li}.bn.running_mean"),
                ParamKind::RunningMean,
                true,
                Tensor::zeros(&[channels]),
            ),
            var: params.push(
                format!("layer{li}.bn.running_var"),
                ParamKind::RunningVar,
                true,
                Tensor::full(&[channels], 1.0),
            ),
            channels,
            spatial,
        },
    })
}

struct PostCtx<'a> {
    pvars: &'a [Var],
    params: &'a ParamSet,
    eps: f64,
    training: bool,
    bn_updates: &'a mut Vec<BnUpdate>,
}

impl PostCtx<'_> {
    fn apply(&mut self, tape: &mut Tape, h: Var, post: &PostNorm) -> Result<Var> {
        let eps = self.eps;
        match *post {
            PostNorm::None => Ok(h),
            PostNorm::Scale => tape.scale_norm(h, eps),
            PostNorm::Mv => tape.mv_norm(h, 1, eps),
            PostNorm::Shift => tape.shift(h),
            PostNorm::MvAffine { gamma, beta } => {
                let n = tape.mv_norm(h, 1, eps)?;
                tape.element_affine(n, self.pvars[gamma], self.pvars[beta], 1)
            }
            PostNorm::Group(g) => tape.mv_norm(h, g, eps),
            PostNorm::Batch {
                gamma,
                beta,
                mean,
                var,
                channels,
                spatial,
            } => {
                let (n, stats) = tape.batch_norm(
                    h,
                    channels,
                    spatial,
                    eps,
                    self.training,
                    (self.params.value(mean).data(), self.params.value(var).data()),
                )?;
                if let Some(stats) = stats {
                    self.bn_updates.push(BnUpdate { mean, var, stats });
                }
                tape.element_affine(n, self.pvars[gamma], self.pvars[beta], spatial)
            }
        }
    }
}

fn activate(tape: &mut Tape, z: Var, act: Activation, pre_mv: bool, eps: f64) -> Result<Var> {
    let z = if pre_mv { tape.mv_norm(z, 1, eps)? } else { z };
    tape.activation(z, act)
}

/// Tape handles of one residual block's affine maps.
pub struct BlockWeights {
    pub a1: Var,
    pub b1: Option<Var>,
    pub a2: Var,
    pub b2: Option<Var>,
}

/// Records one residual block on `tape`; `x` is `[B, dim]`.
pub fn residual_block(
    tape: &mut Tape,
    x: Var,
    w: &BlockWeights,
    variant: ResidualVariant,
    act: Activation,
    eps: f64,
    pre_mv: bool,
) -> Result<Var> {
    let t = tape.affine(x, w.a1, w.b1)?;
    let t = tape.activation(t, act)?;
    let t = match variant {
        ResidualVariant::Plain => t,
        ResidualVariant::LnInner | ResidualVariant::LnShift | ResidualVariant::FnInnerMv => tape.mv_norm(t, 1, eps)?,
        ResidualVariant::FnInnerScale => tape.scale_norm(t, eps)?,
    };
    let t = tape.affine(t, w.a2, w.b2)?;
    let s = tape.add(x, t)?;
    let o = activate(tape, s, act, pre_mv, eps)?;
    match variant {
        ResidualVariant::LnInner => tape.mv_norm(o, 1, eps),
        ResidualVariant::LnShift => tape.shift(o),
        _ => Ok(o),
    }
}

/// Single-vector residual block with bias-free `A₁ = a1`, `A₂ = a2`.
pub fn residual_block_forward(
    x: &[f64],
    variant: ResidualVariant,
    a1: &Tensor,
    a2: &Tensor,
    act: Activation,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::new(vec![1, x.len()], x.to_vec())?)?;
    let w = BlockWeights {
        a1: tape.leaf(a1.clone())?,
        b1: None,
        a2: tape.leaf(a2.clone())?,
        b2: None,
    };
    let out = residual_block(&mut tape, xv, &w, variant, act, eps, false)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, width: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * width).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::new(vec![rows, width], data).unwrap()
    }

    #[test]
    fn fn_last_features_have_norm_sqrt_d() {
        let m = Model::build(NetworkSpec::mlp(6, &[8, 5], 3, NormMode::FnLast), 1).unwrap();
        let (_, f) = m.forward(&batch(4, 6, 2)).unwrap();
        for row in f.rows() {
            assert!((crate::norm::l2_norm(row) - 5f64.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn ln_reduced_features_are_centered() {
        let m = Model::build(NetworkSpec::mlp(6, &[8, 5], 3, NormMode::LnReduced), 1).unwrap();
        let (_, f) = m.forward(&batch(4, 6, 3)).unwrap();
        for row in f.rows() {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn layerwise_and_reduced_share_initial_parameters() {
        let a = Model::build(NetworkSpec::mlp(6, &[8, 8, 5], 3, NormMode::LnLayerwise), 9).unwrap();
        let b = Model::build(NetworkSpec::mlp(6, &[8, 8, 5], 3, NormMode::LnReduced), 9).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn learnable_ln_adds_two_d_per_layer() {
        let hidden = [8, 7, 5];
        let a = Model::build(NetworkSpec::mlp(6, &hidden, 3, NormMode::LnLayerwise), 0).unwrap();
        let b = Model::build(NetworkSpec::mlp(6, &hidden, 3, NormMode::LnLearnable), 0).unwrap();
        let extra: usize = hidden.iter().map(|d| 2 * d).sum();
        assert_eq!(b.params().num_trainable(), a.params().num_trainable() + extra);
    }

    #[test]
    fn reducible_modes_reject_inner_biases() {
        let spec = NetworkSpec::mlp(4, &[4, 4], 2, NormMode::FnLast).with_bias_policy(BiasPolicy::AllBiases);
        assert!(matches!(Model::build(spec.clone(), 0), Err(Error::InvalidSpec(_))));
        assert!(Model::build_unchecked(spec, 0).is_ok());
    }

    #[test]
    fn cnn_fn_last_normalizes_only_the_dense_feature() {
        let m = Model::build(NetworkSpec::cnn(10, NormMode::FnLast), 0).unwrap();
        let norms: Vec<&PostNorm> = m
            .stages
            .iter()
            .filter_map(|s| match s {
                Stage::Dense { post, .. } | Stage::Conv { post, .. } => Some(post),
                _ => None,
            })
            .collect();
        assert_eq!(norms, vec![&PostNorm::None, &PostNorm::None, &PostNorm::Scale]);
        assert_eq!(m.feature_dim(), 384);
    }

    #[test]
    fn plain_block_with_zero_maps_is_activation() {
        let z = Tensor::zeros(&[3, 3]);
        let x = [1.0, -2.0, 0.5];
        let out = residual_block_forward(&x, ResidualVariant::Plain, &z, &z, Activation::Relu, 0.0).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = Model::build(NetworkSpec::mlp(6, &[4], 2, NormMode::None), 0).unwrap();
        assert!(m.forward(&batch(2, 5, 0)).is_err());
    }
}
