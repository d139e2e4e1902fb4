use super::conv::{conv2d_backward, conv2d_batch, maxpool_batch};
use super::linear::{affine_backward, affine_batch};
use super::loss::{batch_cross_entropy, decorrelation_backward, decorrelation_penalty};
use super::{Activation, Tensor};
use crate::error::{Error, Result};
use crate::norm::{self, BatchStats};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Activation {
        x: Var,
        act: Activation,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Row-wise MV normalization over `groups` contiguous chunks; `inv` holds
    /// one inverse scale per (row, group).
    MvNorm {
        x: Var,
        groups: usize,
        inv: Vec<f64>,
    },
    ScaleNorm {
        x: Var,
        eps: f64,
    },
    Shift {
        x: Var,
    },
    /// `γ ⊙ x + β` per row, with each γ/β entry spanning `spatial` values.
    ElementAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        spatial: usize,
    },
    BatchNorm {
        x: Var,
        inv: Vec<f64>,
        spatial: usize,
        training: bool,
    },
    ColumnScale {
        x: Var,
        scale: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Decorrelation {
        x: Var,
        z: Vec<f64>,
        inv_std: Vec<f64>,
        k: Vec<f64>,
    },
    HalfSumSquares {
        x: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Fingerprint of every piecewise branch taken during a forward pass
/// (activation signs, pooling winners, scale-norm floor). Two evaluations with
/// equal signatures lie on the same smooth piece of the network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchSignature(Vec<u64>);

/// Reverse-mode gradient tape (a Wengert list).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "forward value of node {} is not finite",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Batched `x · Wᵀ + b` for `x: [B, d_in]`, `W: [d_out, d_in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = affine_batch(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(out, Op::Affine { x, w, b })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let out = self.value(x).map(|t| act.apply(t));
        self.push(out, Op::Activation { x, act })
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let out = conv2d_batch(self.value(x), self.value(k), b.map(|b| self.value(b)), stride)?;
        self.push(out, Op::Conv2d { x, k, b, stride })
    }

    pub fn maxpool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = maxpool_batch(self.value(x), window, stride)?;
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Flattens everything after the batch dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = vec![v.batch(), v.row_len()];
        self.reshape(x, shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add { a, b })
    }

    /// Row-wise MV normalization; `groups > 1` gives group normalization.
    pub fn mv_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let n = v.row_len();
        if groups == 0 || !n.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{groups} groups do not divide width {n}"
            )));
        }
        let size = n / groups;
        let mut out = Vec::with_capacity(v.len());
        let mut inv = Vec::with_capacity(v.batch() * groups);
        for chunk in v.data().chunks_exact(size) {
            let (y, s) = norm::mv_normalize_with_scale(chunk, eps)?;
            out.extend(y);
            inv.push(s);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, Op::MvNorm { x, groups, inv })
    }

    /// Row-wise scale normalization. With `eps = 0` a zero row is a
    /// degenerate input.
    pub fn scale_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len());
        for row in v.rows() {
            if eps == 0.0 && row.iter().all(|&t| t == 0.0) {
                return Err(Error::Degenerate(
                    "scale normalization of a zero vector with ε = 0".into(),
                ));
            }
            out.extend(norm::scale_normalize(row, eps));
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, Op::ScaleNorm { x, eps })
    }

    pub fn shift(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len());
        for row in v.rows() {
            out.extend(norm::mean_shift(row));
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        self.push(out, Op::Shift { x })
    }

    pub fn element_affine(&mut self, x: Var, gamma: Var, beta: Var, spatial: usize) -> Result<Var> {
        let (v, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let n = v.row_len();
        if g.len() * spatial != n || b.len() != g.len() {
            return Err(Error::shape(format!(
                "γ/β of length {} (spatial {spatial}) do not fit width {n}",
                g.len()
            )));
        }
        let mut out = v.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (c, chunk) in row.chunks_exact_mut(spatial).enumerate() {
                let (gc, bc) = (g.data()[c], b.data()[c]);
                for t in chunk {
                    *t = gc * *t + bc;
                }
            }
        }
        self.push(out, Op::ElementAffine { x, gamma, beta, spatial })
    }

    /// Batch normalization. In training mode the batch statistics are used
    /// and returned; otherwise `running = (mean, var)` is applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        channels: usize,
        spatial: usize,
        eps: f64,
        training: bool,
        running: (&[f64], &[f64]),
    ) -> Result<(Var, Option<BatchStats>)> {
        let v = self.value(x);
        let (stats, mean, var) = if training {
            let s = norm::batch_statistics(v, channels, spatial)?;
            let (m, va) = (s.mean.clone(), s.var.clone());
            (Some(s), m, va)
        } else {
            (None, running.0.to_vec(), running.1.to_vec())
        };
        let out = norm::apply_statistics(v, &mean, &var, eps, spatial)?;
        let inv = var.iter().map(|s| 1.0 / (s + eps * eps).sqrt()).collect();
        let var_out = self.push(
            out,
            Op::BatchNorm {
                x,
                inv,
                spatial,
                training,
            },
        )?;
        Ok((var_out, stats))
    }

    /// Multiplies column `j` of a `[B, C]` tensor by `scale[j]`.
    pub fn column_scale(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let v = self.value(x);
        if v.row_len() != scale.len() {
            return Err(Error::shape("column scale length mismatch"));
        }
        let mut out = v.clone();
        let n = scale.len();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (t, s) in row.iter_mut().zip(&scale) {
                *t *= s;
            }
        }
        self.push(out, Op::ColumnScale { x, scale })
    }

    /// Mean softmax cross-entropy over the batch, with optional additive
    /// per-class logit offsets.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], offsets: Option<&[f64]>) -> Result<Var> {
        let (loss, probs) = batch_cross_entropy(self.value(logits), labels, offsets)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean squared off-diagonal batch correlation of `x: [B, d]`.
    pub fn decorrelation(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (value, z, inv_std, k) = decorrelation_penalty(self.value(x), eps)?;
        self.push(Tensor::scalar(value), Op::Decorrelation { x, z, inv_std, k })
    }

    /// `½ Σ x²`.
    pub fn half_sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = 0.5 * self.value(x).data().iter().map(|v| v * v).sum::<f64>();
        self.push(Tensor::scalar(s), Op::HalfSumSquares { x })
    }

    /// `Σ cᵢ tᵢ` over scalar values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum expects scalars"));
            }
            s += c * self.value(v).item();
        }
        self.push(Tensor::scalar(s), Op::WeightedSum { terms: terms.to_vec() })
    }

    pub fn branch_signature(&self) -> BranchSignature {
        let mut bits = BitPacker::default();
        for node in &self.nodes {
            match &node.op {
                Op::Activation { x, .. } => {
                    for &t in self.value(*x).data() {
                        bits.push(t > 0.0);
                    }
                }
                Op::MaxPool { argmax, .. } => {
                    bits.words.extend(argmax.iter().map(|&i| i as u64));
                }
                Op::ScaleNorm { x, eps } => {
                    for row in self.value(*x).rows() {
                        bits.push(norm::l2_norm(row) > *eps);
                    }
                }
                _ => {}
            }
        }
        BranchSignature(bits.finish())
    }

    /// Smallest scale any normalization on the tape divided by: `√(σ² + ε²)`
    /// for MV, group and batch norm, `‖x‖` for scale norm. Infinite when the
    /// tape holds no normalization. Below the finite-difference step's reach
    /// these ops curve too sharply for a difference quotient.
    pub fn min_norm_scale(&self) -> f64 {
        let mut m = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::MvNorm { inv, .. } | Op::BatchNorm { inv, .. } => {
                    m = inv.iter().fold(m, |a, &i| a.min(1.0 / i));
                }
                Op::ScaleNorm { x, .. } => {
                    m = self.value(*x).rows().fold(m, |a, r| a.min(norm::l2_norm(r)));
                }
                _ => {}
            }
        }
        m
    }

    /// Reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let (dx, dw, db) =
                        affine_backward(self.value(*x), self.value(*w), &g, b.is_some());
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Activation { x, act } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&t, &gv)| gv * act.derivative(t))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
                }
                Op::Conv2d { x, k, b, stride } => {
                    let (dx, dk, db) =
                        conv2d_backward(self.value(*x), self.value(*k), *stride, &g, b.is_some());
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *k, dk);
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = vec![0.0; xv.len()];
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src] += gv;
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Reshape { x } => {
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(shape)?);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::MvNorm { x, groups, inv } => {
                    let y = &node.value;
                    let size = y.row_len() / groups;
                    let mut dx = Vec::with_capacity(y.len());
                    for ((yc, gc), s) in y
                        .data()
                        .chunks_exact(size)
                        .zip(g.data().chunks_exact(size))
                        .zip(inv)
                    {
                        dx.extend(norm::mv_backward(yc, *s, gc));
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::ScaleNorm { x, eps } => {
                    let xv = self.value(*x);
                    let mut dx = Vec::with_capacity(xv.len());
                    for (row, gr) in xv.rows().zip(g.rows()) {
                        dx.extend(norm::scale_backward(row, *eps, gr));
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Shift { x } => {
                    let mut dx = Vec::with_capacity(g.len());
                    for gr in g.rows() {
                        dx.extend(norm::mean_shift(gr));
                    }
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                Op::ElementAffine {
                    x,
                    gamma,
                    beta,
                    spatial,
                } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let n = xv.row_len();
                    let mut dx = g.clone();
                    let mut dgamma = vec![0.0; gv.len()];
                    let mut dbeta = vec![0.0; gv.len()];
                    for (r, (xrow, grow)) in xv.rows().zip(g.rows()).enumerate() {
                        let dxrow = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for c in 0..gv.len() {
                            let span = c * spatial..(c + 1) * spatial;
                            for j in span {
                                dgamma[c] += grow[j] * xrow[j];
                                dbeta[c] += grow[j];
                                dxrow[j] *= gv.data()[c];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    let shape = gv.shape().to_vec();
                    accumulate(&mut grads, *gamma, Tensor::new(shape.clone(), dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::new(shape, dbeta)?);
                }
                Op::BatchNorm {
                    x,
                    inv,
                    spatial,
                    training,
                } => {
                    let y = &node.value;
                    let n = y.row_len();
                    let channels = inv.len();
                    let mut dx = vec![0.0; y.len()];
                    if *training {
                        let count = (y.batch() * spatial) as f64;
                        let mut mean_g = vec![0.0; channels];
                        let mut mean_gy = vec![0.0; channels];
                        for (yr, gr) in y.rows().zip(g.rows()) {
                            for j in 0..n {
                                let c = j / spatial;
                                mean_g[c] += gr[j];
                                mean_gy[c] += gr[j] * yr[j];
                            }
                        }
                        for c in 0..channels {
                            mean_g[c] /= count;
                            mean_gy[c] /= count;
                        }
                        for (idx, d) in dx.iter_mut().enumerate() {
                            let c = (idx % n) / spatial;
                            *d = inv[c] * (g.data()[idx] - mean_g[c] - y.data()[idx] * mean_gy[c]);
                        }
                    } else {
                        for (idx, d) in dx.iter_mut().enumerate() {
                            *d = g.data()[idx] * inv[(idx % n) / spatial];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::ColumnScale { x, scale } => {
                    let mut dx = g.clone();
                    let n = scale.len();
                    for row in dx.data_mut().chunks_exact_mut(n) {
                        for (t, s) in row.iter_mut().zip(scale) {
                            *t *= s;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let c = lv.row_len();
                    let scale = g.item() / labels.len() as f64;
                    let mut dl = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        dl[r * c + y] -= 1.0;
                    }
                    dl.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
                }
                Op::Decorrelation { x, z, inv_std, k } => {
                    let xv = self.value(*x);
                    let (b, d) = (xv.batch(), xv.row_len());
                    let dx = decorrelation_backward(b, d, z, inv_std, k, g.item());
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::HalfSumSquares { x } => {
                    let s = g.item();
                    accumulate(&mut grads, *x, self.value(*x).map(|v| v * s));
                }
                Op::WeightedSum { terms } => {
                    for &(v, c) in terms {
                        let shape = self.value(v).shape().to_vec();
                        accumulate(&mut grads, v, Tensor::full(&shape, c * g.item()));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[derive(Default)]
struct BitPacker {
    words: Vec<u64>,
    current: u64,
    filled: u32,
}

impl BitPacker {
    fn push(&mut self, bit: bool) {
        self.current |= u64::from(bit) << self.filled;
        self.filled += 1;
        if self.filled == 64 {
            self.words.push(self.current);
            self.current = 0;
            self.filled = 0;
        }
    }

    fn finish(mut self) -> Vec<u64> {
        self.words.push(self.current);
        self.words.push(u64::from(self.filled));
        self.words
    }
}
