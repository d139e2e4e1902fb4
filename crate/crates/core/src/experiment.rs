//! Experiment driver: builds data, partitions and model from an
//! [`ExperimentConfig`], runs the simulation and writes the run artifacts.
//!
//! A run directory holds `manifest.json`, `metrics.jsonl` (one
//! [`RoundRecord`] per line), `summary.json` and `checkpoint.json`. None of
//! them contain timestamps, so repeating a run reproduces them byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, LocalSchedule, NormTrace, OverfitReport, SpectrumReport};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{
    load_csv, load_idx, partition, partition_test_like_train, ClientShard, Dataset, GaussianMixture, PartitionPlan,
};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, RoundRecord, Simulation};
use crate::model::{save_checkpoint, Model, NormMode};
use crate::rng::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

// Child streams of the root seed.
const MIXTURE_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;
const PARTITION_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const SIMULATION_STREAM: u64 = 5;
const PROBE_STREAM: u64 = 6;

/// Everything a run needs before the first round.
#[derive(Clone, Debug)]
pub struct Setup {
    pub train: Dataset,
    pub test: Dataset,
    pub train_shards: Vec<ClientShard>,
    pub test_shards: Vec<ClientShard>,
    pub model: Model,
    pub warnings: Vec<String>,
}

pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let seed = config.seed;
    match &config.dataset {
        DatasetConfig::GaussianMixture {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } => {
            let mix = GaussianMixture::new(*classes, *dim, *separation, derive_seed(seed, MIXTURE_STREAM))?;
            Ok((
                mix.sample(*train_per_class, derive_seed(seed, TRAIN_STREAM))?,
                mix.sample(*test_per_class, derive_seed(seed, TEST_STREAM))?,
            ))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => Ok((load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?)),
        DatasetConfig::Csv { train, test, classes } => Ok((load_csv(train, *classes)?, load_csv(test, *classes)?)),
    }
}

pub fn partition_plan(config: &ExperimentConfig) -> PartitionPlan {
    PartitionPlan {
        scheme: config.partition.scheme,
        clients: config.partition.clients,
        seed: derive_seed(config.seed, PARTITION_STREAM),
    }
}

/// Train and test shards under the configured plan, with test-side warnings.
pub fn shards(
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Vec<ClientShard>, Vec<ClientShard>, Vec<String>)> {
    if train.num_classes() != test.num_classes() || train.sample_shape() != test.sample_shape() {
        return Err(Error::config("dataset", "train and test sets disagree on classes or sample shape"));
    }
    let plan = partition_plan(config);
    let train_shards = partition(train, &plan).map_err(|e| Error::config("partition", e.to_string()))?;
    let (test_shards, warnings) =
        partition_test_like_train(test, &plan).map_err(|e| Error::config("partition", e.to_string()))?;
    Ok((train_shards, test_shards, warnings))
}

pub fn build_model(config: &ExperimentConfig, train: &Dataset) -> Result<Model> {
    let spec = config.model.network(train.sample_shape(), train.num_classes())?;
    Model::build(spec, derive_seed(config.seed, INIT_STREAM))
}

pub fn setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let (train, test) = load_datasets(config)?;
    let (train_shards, test_shards, warnings) = shards(config, &train, &test)?;
    let model = build_model(config, &train)?;
    Ok(Setup {
        train,
        test,
        train_shards,
        test_shards,
        model,
        warnings,
    })
}

/// Reproducibility record written next to the metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn of(config: &ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

/// Final state of a run, one row of an accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub norm: NormMode,
    pub seed: u64,
    pub rounds: usize,
    pub final_global_acc: f64,
    pub per_client_acc: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub final_mean_local_loss: f64,
    pub warnings: Vec<String>,
}

/// Result of an in-memory run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
    pub model: Model,
}

/// Runs the configured experiment, handing each record to `sink`.
pub fn run_with(config: &ExperimentConfig, mut sink: impl FnMut(&RoundRecord) -> Result<()>) -> Result<RunOutput> {
    let s = setup(config)?;
    let mut sim = Simulation::new(
        s.model,
        &s.train,
        s.train_shards,
        &s.test,
        s.test_shards,
        config.federation.clone(),
        derive_seed(config.seed, SIMULATION_STREAM),
    )?;
    let mut records = Vec::new();
    let last = sim
        .run(|r, _| {
            sink(r)?;
            records.push(r.clone());
            Ok(())
        })?
        .ok_or_else(|| Error::invalid("run produced no evaluation"))?;
    let summary = Summary {
        algorithm: config.federation.algorithm,
        norm: config.model.norm(),
        seed: config.seed,
        rounds: last.round,
        final_global_acc: last.global_acc,
        per_client_acc: last.per_client_acc,
        per_class_acc: last.per_class_acc,
        final_mean_local_loss: last.mean_local_loss,
        warnings: s.warnings,
    };
    Ok(RunOutput {
        records,
        summary,
        model: sim.global_model(),
    })
}

pub fn run_in_memory(config: &ExperimentConfig) -> Result<RunOutput> {
    run_with(config, |_| Ok(()))
}

/// Runs the experiment and writes the four artifacts into `out_dir`.
pub fn run_to_dir(config: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(MANIFEST_FILE), &Manifest::of(config))?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    let out = run_with(config, |r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n")?;
        Ok(())
    })?;
    metrics.flush()?;
    write_json(&out_dir.join(SUMMARY_FILE), &out.summary)?;
    save_checkpoint(&out.model, &out_dir.join(CHECKPOINT_FILE))?;
    Ok(out.summary)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// One line of a partition dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub split: String,
    pub client_id: usize,
    pub m: usize,
    pub histogram: Vec<usize>,
}

/// Train and test shard histograms under the configured plan.
pub fn partition_records(config: &ExperimentConfig) -> Result<(Vec<ShardRecord>, Vec<String>)> {
    let (train, test) = load_datasets(config)?;
    let (tr, te, warnings) = shards(config, &train, &test)?;
    let rec = |split: &str, s: &ClientShard| ShardRecord {
        split: split.into(),
        client_id: s.client_id,
        m: s.m(),
        histogram: s.label_histogram.clone(),
    };
    let records = tr
        .iter()
        .map(|s| rec("train", s))
        .chain(te.iter().map(|s| rec("test", s)))
        .collect();
    Ok((records, warnings))
}

/// Probes of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    Spectrum,
    Norms,
    Overfit,
}

impl std::str::FromStr for Probe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectrum" => Ok(Probe::Spectrum),
            "norms" => Ok(Probe::Norms),
            "overfit" => Ok(Probe::Overfit),
            other => Err(Error::invalid(format!("unknown probe {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyzeOptions {
    pub client: usize,
    /// Local steps for `norms` and `overfit`.
    pub steps: usize,
    /// Test samples feeding the spectrum and the norm probes.
    pub probes: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            client: 0,
            steps: 5,
            probes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "probe", rename_all = "snake_case")]
pub enum AnalysisRecord {
    Spectrum { client: usize, report: SpectrumReport },
    Norms { client: usize, trace: NormTrace },
    Overfit { client: usize, report: OverfitReport },
}

/// Runs `probe` on `model` against the configured data and partition.
pub fn analyze(config: &ExperimentConfig, model: &Model, probe: Probe, opts: &AnalyzeOptions) -> Result<AnalysisRecord> {
    let (train, test) = load_datasets(config)?;
    let (train_shards, _, _) = shards(config, &train, &test)?;
    let shard = train_shards
        .get(opts.client)
        .ok_or_else(|| Error::config("--client", format!("only {} clients", train_shards.len())))?;
    if model.spec().input_shape.iter().product::<usize>() != train.sample_shape().iter().product::<usize>() {
        return Err(Error::config("dataset", "checkpoint input size does not match the dataset"));
    }
    let probe_seed = derive_seed(config.seed, PROBE_STREAM);
    let probe_set = || -> Result<_> {
        let idx = analysis::probe_indices(&test, opts.probes, probe_seed);
        Ok(test.batch(&idx)?.0)
    };
    let schedule = LocalSchedule {
        steps: opts.steps,
        lr: config.federation.lr,
        batch_size: config.federation.batch_size,
        seed: probe_seed,
    };
    let client = opts.client;
    Ok(match probe {
        Probe::Spectrum => AnalysisRecord::Spectrum {
            client,
            report: analysis::spectral_gap(model, &probe_set()?)?,
        },
        Probe::Norms => AnalysisRecord::Norms {
            client,
            trace: analysis::norm_trace(model, &train, shard, &probe_set()?, &schedule, None)?.0,
        },
        Probe::Overfit => AnalysisRecord::Overfit {
            client,
            report: analysis::local_overfit_probe(model, &train, shard, &test, &schedule)?,
        },
    })
}
