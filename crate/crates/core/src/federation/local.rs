use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Algorithm;
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::tensor::Tape;

/// Minibatches drawn from a reshuffled pass over the shard; a new pass starts
/// whenever fewer than `batch_size` indices remain.
pub struct BatchSampler {
    indices: Vec<usize>,
    batch: usize,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(indices: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("cannot sample batches from an empty shard"));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices = indices.to_vec();
        indices.shuffle(&mut rng);
        Ok(Self {
            batch: batch_size.min(indices.len()),
            indices,
            cursor: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch > self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = &self.indices[self.cursor..self.cursor + self.batch];
        self.cursor += self.batch;
        out
    }
}

/// FedLC additive logit offsets `−τ·max(n_c, 1e−8)^{−1/4}` from local class
/// counts. Kept in one place so the calibration form can be swapped.
pub fn fedlc_offsets(histogram: &[usize], tau: f64) -> Vec<f64> {
    histogram
        .iter()
        .map(|&n| -tau * (n as f64).max(1e-8).powf(-0.25))
        .collect()
}

/// FedRS logit multipliers: `α` for classes absent from the shard, 1 else.
pub fn fedrs_scales(histogram: &[usize], alpha: f64) -> Vec<f64> {
    histogram.iter().map(|&n| if n == 0 { alpha } else { 1.0 }).collect()
}

/// SCAFFOLD control variates for one client round.
pub struct ControlVariates<'a> {
    pub global: &'a ParamSet,
    pub local: &'a ParamSet,
}

pub struct LocalOutcome {
    pub params: ParamSet,
    /// Mean of the per-step training objectives.
    pub mean_loss: f64,
    /// Updated SCAFFOLD local control variate.
    pub control: Option<ParamSet>,
}

/// Runs `steps` minibatch SGD steps from `model`'s parameters on the shard.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    model: &Model,
    data: &Dataset,
    shard: &ClientShard,
    algorithm: &Algorithm,
    steps: usize,
    lr: f64,
    batch_size: usize,
    control: Option<ControlVariates<'_>>,
    seed: u64,
) -> Result<LocalOutcome> {
    local_train_with_hook(model, data, shard, algorithm, steps, lr, batch_size, control, seed, |_, _, _| Ok(true))
}

/// [`local_train`] calling `hook(step, model, objective)` after every step.
/// Returning `Ok(false)` stops training early.
#[allow(clippy::too_many_arguments)]
pub fn local_train_with_hook(
    model: &Model,
    data: &Dataset,
    shard: &ClientShard,
    algorithm: &Algorithm,
    steps: usize,
    lr: f64,
    batch_size: usize,
    control: Option<ControlVariates<'_>>,
    seed: u64,
    mut hook: impl FnMut(usize, &Model, f64) -> Result<bool>,
) -> Result<LocalOutcome> {
    if shard.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty shard", shard.client_id)));
    }
    if steps == 0 {
        return Err(Error::invalid("local training needs at least one step"));
    }
    let start = model.params().clone();
    let mut local = model.clone();
    let mut sampler = BatchSampler::new(&shard.indices, batch_size, seed)?;
    let offsets = match *algorithm {
        Algorithm::FedLc { tau } => Some(fedlc_offsets(&shard.label_histogram, tau)),
        _ => None,
    };
    let scales = match *algorithm {
        Algorithm::FedRs { alpha } => Some(fedrs_scales(&shard.label_histogram, alpha)),
        _ => None,
    };
    let correction = match &control {
        Some(cv) => Some(cv.global.sub(cv.local)?),
        None => None,
    };
    let mut total_loss = 0.0;
    let mut taken = 0;
    for step in 0..steps {
        let (x, y) = data.batch(sampler.next_batch())?;
        let mut tape = Tape::new();
        let rec = local.record(&mut tape, &x, true)?;
        let logits = match &scales {
            Some(s) => tape.column_scale(rec.logits, s.clone())?,
            None => rec.logits,
        };
        let ce = tape.cross_entropy(logits, &y, offsets.as_deref())?;
        let loss = match *algorithm {
            Algorithm::FedDecorr { alpha } if x.batch() >= 2 => {
                let penalty = tape.decorrelation(rec.features, crate::norm::DEFAULT_EPSILON)?;
                tape.weighted_sum(&[(ce, 1.0), (penalty, alpha)])?
            }
            _ => ce,
        };
        let mut objective = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let mut g = local.collect_grads(&mut grads, &rec);
        if let Algorithm::FedProx { mu } = *algorithm {
            if mu != 0.0 {
                let drift = local.params().sub(&start)?;
                objective += 0.5 * mu * trainable_sq_norm(&drift);
                g.axpy(mu, &drift)?;
            }
        }
        if let Some(c) = &correction {
            g.axpy(1.0, c)?;
        }
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!("local loss of client {}", shard.client_id)));
        }
        total_loss += objective;
        let params = local.params_mut();
        for i in 0..params.len() {
            if params.get(i).kind.is_trainable() {
                let gi = g.value(i).clone();
                if !gi.is_finite() {
                    return Err(Error::NonFinite("gradient".into()));
                }
                params.value_mut(i).add_scaled(-lr, &gi)?;
            }
        }
        local.apply_bn_updates(&rec.bn_updates);
        taken += 1;
        if !hook(step + 1, &local, objective)? {
            break;
        }
    }
    let control = match control {
        // Option II: c_i⁺ = c_i − c + (x − y_i)/(E·lr).
        Some(cv) => {
            let mut ci = cv.local.sub(cv.global)?;
            let diff = start.sub(local.params())?;
            ci.axpy(1.0 / (taken as f64 * lr), &diff)?;
            Some(ci)
        }
        None => None,
    };
    Ok(LocalOutcome {
        params: local.params().clone(),
        mean_loss: total_loss / taken as f64,
        control,
    })
}

fn trainable_sq_norm(p: &ParamSet) -> f64 {
    p.iter()
        .filter(|q| q.kind.is_trainable())
        .flat_map(|q| q.value.data())
        .map(|v| v * v)
        .sum()
}
