//! Datasets, loaders and label-shift partitioners.

mod csv;
mod idx;
mod partition;
mod synthetic;

pub use self::csv::{load_csv, write_csv};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use partition::{
    partition, partition_dirichlet, partition_n_class, partition_test_like_train, PartitionPlan,
    PartitionScheme,
};
pub use synthetic::{generate_gaussian_mixture, GaussianMixture};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled samples; `inputs` is `[N, …]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("a dataset needs at least one sample".into()));
        }
        if inputs.rank() < 2 || inputs.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Per-sample shape, without the leading sample dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn histogram(&self) -> Vec<usize> {
        histogram(self.labels.iter().copied(), self.num_classes)
    }

    /// Inputs and labels of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.inputs.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(indices)?;
        Dataset::new(x, y, self.num_classes)
    }

    /// Sample indices grouped by class, each in ascending order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

pub(crate) fn histogram(labels: impl Iterator<Item = usize>, classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for y in labels {
        h[y] += 1;
    }
    h
}

/// One client's share of a parent dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, indices: Vec<usize>, parent: &Dataset) -> Self {
        let label_histogram = histogram(indices.iter().map(|&i| parent.labels()[i]), parent.num_classes());
        Self {
            client_id,
            indices,
            label_histogram,
        }
    }

    pub fn m(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Classes with at least one local sample.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.label_histogram.len())
            .filter(|&c| self.label_histogram[c] > 0)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_must_be_in_range() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new(x.clone(), vec![0, 2], 2).is_err());
        let d = Dataset::new(x, vec![0, 1], 2).unwrap();
        assert_eq!(d.histogram(), vec![1, 1]);
        assert_eq!(d.sample_shape(), &[3]);
    }
}
