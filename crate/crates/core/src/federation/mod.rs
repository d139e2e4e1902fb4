//! Federated training: local updates, aggregation, server optimization and
//! evaluation.

mod eval;
mod local;
mod server;

pub use eval::{evaluate, evaluate_with, predict_indices, Evaluation};
pub use local::{fedlc_offsets, fedrs_scales, local_train, local_train_with_hook, BatchSampler, ControlVariates, LocalOutcome};
pub use server::{aggregate, server_update, ServerOpt, YogiState};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name", deny_unknown_fields)]
pub enum Algorithm {
    FedAvg,
    FedProx { mu: f64 },
    Scaffold,
    FedLc { tau: f64 },
    FedRs { alpha: f64 },
    FedDecorr { alpha: f64 },
    FedBn,
}

impl Algorithm {
    pub fn validate(&self) -> Result<()> {
        let bad = match *self {
            Algorithm::FedProx { mu } => !(mu >= 0.0),
            Algorithm::FedLc { tau } => !(tau >= 0.0),
            Algorithm::FedRs { alpha } => !(alpha > 0.0 && alpha <= 1.0),
            Algorithm::FedDecorr { alpha } => !(alpha >= 0.0),
            _ => false,
        };
        if bad {
            return Err(Error::invalid(format!("invalid hyperparameter in {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    pub server_opt: ServerOpt,
    /// Local SGD steps per round.
    pub local_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub participation: f64,
    pub eval_every: usize,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedAvg,
            server_opt: ServerOpt::Plain,
            local_steps: 10,
            lr: 0.01,
            batch_size: 32,
            rounds: 300,
            participation: 1.0,
            eval_every: 10,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        if self.local_steps == 0 || self.batch_size == 0 || self.rounds == 0 || self.eval_every == 0 {
            return Err(Error::invalid("local_steps, batch_size, rounds and eval_every must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::invalid("participation must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-round metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global_acc: f64,
    pub per_client_acc: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub mean_local_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diag: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: ParamSet,
    pub round: usize,
    pub scaffold_c: Option<ParamSet>,
    pub yogi: Option<YogiState>,
}

#[derive(Clone, Debug, Default)]
pub struct ClientState {
    pub scaffold_c: Option<ParamSet>,
    /// Full parameters after the client's last round; its batch-norm entries
    /// are restored on download under FedBN.
    pub bn_local: Option<ParamSet>,
}

/// A federated run in progress.
pub struct Simulation<'a> {
    template: Model,
    train: &'a Dataset,
    test: &'a Dataset,
    train_shards: Vec<ClientShard>,
    test_shards: Vec<ClientShard>,
    algo: AlgoConfig,
    seed: u64,
    server: ServerState,
    clients: Vec<ClientState>,
}

const ROUND_STREAM: u64 = 1 << 32;
const PARTICIPATION_STREAM: u64 = 2 << 32;

impl<'a> Simulation<'a> {
    pub fn new(
        model: Model,
        train: &'a Dataset,
        train_shards: Vec<ClientShard>,
        test: &'a Dataset,
        test_shards: Vec<ClientShard>,
        algo: AlgoConfig,
        seed: u64,
    ) -> Result<Self> {
        algo.validate()?;
        if train_shards.is_empty() || train_shards.len() != test_shards.len() {
            return Err(Error::invalid("need one train and one test shard per client"));
        }
        if let Some(s) = train_shards.iter().find(|s| s.is_empty()) {
            return Err(Error::invalid(format!("client {} has an empty training shard", s.client_id)));
        }
        let global = model.params().clone();
        let scaffold = matches!(algo.algorithm, Algorithm::Scaffold);
        let clients = (0..train_shards.len())
            .map(|_| ClientState {
                scaffold_c: scaffold.then(|| global.zeros_like()),
                bn_local: None,
            })
            .collect();
        Ok(Self {
            server: ServerState {
                scaffold_c: scaffold.then(|| global.zeros_like()),
                global,
                round: 0,
                yogi: None,
            },
            template: model,
            train,
            test,
            train_shards,
            test_shards,
            algo,
            seed,
            clients,
        })
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn config(&self) -> &AlgoConfig {
        &self.algo
    }

    /// The current global model.
    pub fn global_model(&self) -> Model {
        let mut m = self.template.clone();
        m.set_params(self.server.global.clone()).expect("layout fixed at construction");
        m
    }

    /// Model client `k` starts from: the global one, with its own batch-norm
    /// entries under FedBN.
    pub fn client_model(&self, k: usize) -> Model {
        let mut m = self.global_model();
        if matches!(self.algo.algorithm, Algorithm::FedBn) {
            if let Some(local) = &self.clients[k].bn_local {
                for i in 0..local.len() {
                    if local.get(i).batch_norm {
                        *m.params_mut().value_mut(i) = local.value(i).clone();
                    }
                }
            }
        }
        m
    }

    fn participants(&self, round: usize) -> Vec<usize> {
        let k = self.train_shards.len();
        let m = ((self.algo.participation * k as f64).round() as usize).clamp(1, k);
        if m == k {
            return (0..k).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, PARTICIPATION_STREAM + round as u64));
        let mut ids = sample(&mut rng, k, m).into_vec();
        ids.sort_unstable();
        ids
    }

    /// Runs one round; returns the aggregate (before the server optimizer)
    /// and the mean local loss.
    pub fn round(&mut self) -> Result<(ParamSet, f64)> {
        let round = self.server.round;
        let ids = self.participants(round);
        let round_seed = derive_seed(self.seed, ROUND_STREAM + round as u64);
        let algo = &self.algo;
        let results: Vec<Result<LocalOutcome>> = ids
            .par_iter()
            .map(|&k| {
                let model = self.client_model(k);
                let control = match (&self.server.scaffold_c, &self.clients[k].scaffold_c) {
                    (Some(c), Some(ci)) => Some(ControlVariates { global: c, local: ci }),
                    _ => None,
                };
                local_train(
                    &model,
                    self.train,
                    &self.train_shards[k],
                    &algo.algorithm,
                    algo.local_steps,
                    algo.lr,
                    algo.batch_size,
                    control,
                    derive_seed(round_seed, k as u64),
                )
            })
            .collect();
        let outcomes = results.into_iter().collect::<Result<Vec<_>>>()?;

        let weighted: Vec<(&ParamSet, f64)> = outcomes
            .iter()
            .zip(&ids)
            .map(|(o, &k)| (&o.params, self.train_shards[k].m() as f64))
            .collect();
        let aggregated = aggregate(&weighted)?;
        let mean_loss = outcomes.iter().map(|o| o.mean_loss).sum::<f64>() / outcomes.len() as f64;

        if let Some(c) = &mut self.server.scaffold_c {
            // c ← c + (|S|/K)·mean_i(c_i⁺ − c_i)
            let mut delta = c.zeros_like();
            for (o, &k) in outcomes.iter().zip(&ids) {
                let new_ci = o.control.as_ref().expect("scaffold clients return variates");
                let old_ci = self.clients[k].scaffold_c.as_ref().expect("scaffold state");
                delta.axpy(1.0 / ids.len() as f64, &new_ci.sub(old_ci)?)?;
            }
            c.axpy(ids.len() as f64 / self.clients.len() as f64, &delta)?;
        }
        for (o, &k) in outcomes.into_iter().zip(&ids) {
            if let Some(ci) = o.control {
                self.clients[k].scaffold_c = Some(ci);
            }
            if matches!(self.algo.algorithm, Algorithm::FedBn) {
                self.clients[k].bn_local = Some(o.params);
            }
        }
        server_update(&self.algo.server_opt, &mut self.server.global, &aggregated, &mut self.server.yogi)?;
        self.server.round += 1;
        Ok((aggregated, mean_loss))
    }

    /// Evaluates the current state on the test shards; FedBN evaluates each
    /// client with its own batch-norm entries.
    pub fn evaluate(&self) -> Result<Evaluation> {
        if matches!(self.algo.algorithm, Algorithm::FedBn) {
            let models: Vec<Model> = (0..self.clients.len()).map(|k| self.client_model(k)).collect();
            evaluate_with(self.test, &self.test_shards, |k| &models[k])
        } else {
            let m = self.global_model();
            evaluate(&m, self.test, &self.test_shards)
        }
    }

    /// Runs all configured rounds, handing a record to `sink` after every
    /// evaluation round (every `eval_every` rounds and the last).
    pub fn run(&mut self, mut sink: impl FnMut(&RoundRecord, &Self) -> Result<()>) -> Result<Option<RoundRecord>> {
        let mut last = None;
        while self.server.round < self.algo.rounds {
            let (_, mean_loss) = self.round()?;
            let r = self.server.round;
            if r.is_multiple_of(self.algo.eval_every) || r == self.algo.rounds {
                let ev = self.evaluate()?;
                let rec = RoundRecord {
                    round: r,
                    global_acc: ev.global_acc,
                    per_client_acc: ev.per_client_acc,
                    per_class_acc: ev.per_class_acc,
                    mean_local_loss: mean_loss,
                    diag: None,
                };
                sink(&rec, self)?;
                last = Some(rec);
            }
        }
        Ok(last)
    }
}

/// Builds a simulation and runs it to the end, returning every record.
pub fn run_experiment(
    model: Model,
    train: &Dataset,
    train_shards: Vec<ClientShard>,
    test: &Dataset,
    test_shards: Vec<ClientShard>,
    algo: AlgoConfig,
    seed: u64,
) -> Result<(Vec<RoundRecord>, Model)> {
    let mut sim = Simulation::new(model, train, train_shards, test, test_shards, algo, seed)?;
    let mut records = Vec::new();
    sim.run(|r, _| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((records, sim.global_model()))
}
