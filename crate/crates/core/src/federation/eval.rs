use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::argmax;

const EVAL_CHUNK: usize = 256;

/// Accuracy summary of one evaluation pass. Entries are `None` where no
/// samples exist (empty shard or absent class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub global_acc: f64,
    pub per_client_acc: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    /// `confusion[true][predicted]` over all evaluated samples.
    pub confusion: Vec<Vec<usize>>,
    pub warnings: Vec<String>,
}

/// Predictions for the given samples, evaluated in chunks.
pub fn predict_indices(model: &Model, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk)?;
        let (logits, _) = model.forward(&x)?;
        out.extend(logits.rows().map(argmax));
    }
    Ok(out)
}

/// Evaluates client `k`'s shard with `model_for(k)`; the global accuracy is
/// the sample-weighted mean over non-empty shards.
pub fn evaluate_with<'m>(
    data: &Dataset,
    shards: &[ClientShard],
    mut model_for: impl FnMut(usize) -> &'m Model,
) -> Result<Evaluation> {
    let c = data.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let mut per_client_acc = Vec::with_capacity(shards.len());
    let mut warnings = Vec::new();
    let (mut correct, mut total) = (0usize, 0usize);
    for shard in shards {
        if shard.is_empty() {
            warnings.push(format!("client {}: empty test shard excluded", shard.client_id));
            per_client_acc.push(None);
            continue;
        }
        let pred = predict_indices(model_for(shard.client_id), data, &shard.indices)?;
        let mut ok = 0;
        for (&i, &p) in shard.indices.iter().zip(&pred) {
            let y = data.labels()[i];
            confusion[y][p] += 1;
            ok += usize::from(y == p);
        }
        per_client_acc.push(Some(ok as f64 / shard.m() as f64));
        correct += ok;
        total += shard.m();
    }
    let per_class_acc = confusion
        .iter()
        .enumerate()
        .map(|(y, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[y] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        global_acc: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        per_client_acc,
        per_class_acc,
        confusion,
        warnings,
    })
}

pub fn evaluate(model: &Model, data: &Dataset, shards: &[ClientShard]) -> Result<Evaluation> {
    evaluate_with(data, shards, |_| model)
}
