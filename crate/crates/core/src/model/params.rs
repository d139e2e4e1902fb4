use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    Classifier,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Batch-norm parameters and statistics; kept local under FedBN.
    #[serde(default)]
    pub batch_norm: bool,
    pub value: Tensor,
}

/// Ordered parameters of one model, including batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: String, kind: ParamKind, batch_norm: bool, value: Tensor) -> usize {
        self.params.push(Param {
            name,
            kind,
            batch_norm,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Scalar count of trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// True when names, kinds and shapes agree entry by entry.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape()
            })
    }

    fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::shape("parameter sets have different layouts"))
        }
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = self.clone();
        for p in &mut out.params {
            p.value = Tensor::zeros(p.value.shape());
        }
        out
    }

    /// `self += alpha · other`, entry by entry.
    pub fn axpy(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value.add_scaled(alpha, &b.value)?;
        }
        Ok(())
    }

    /// `self − other`.
    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, alpha: f64) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.value.data())
            .map(|v| v * v)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
