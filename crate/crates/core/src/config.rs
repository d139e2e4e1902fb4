//! TOML experiment configuration.
//!
//! Keys mirror the struct fields one-to-one; unknown keys are rejected.
//! Errors carry the dotted path of the offending key.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionScheme;
use crate::error::{Error, Result};
use crate::federation::AlgoConfig;
use crate::model::{BiasPolicy, NetworkSpec, NormMode, ResidualVariant};

/// The configuration shipped as `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory receiving the run artifacts.
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: ModelConfig,
    pub federation: AlgoConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    GaussianMixture {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        separation: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        classes: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub scheme: PartitionScheme,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp {
        hidden: Vec<usize>,
        norm: NormMode,
        #[serde(default = "default_bias")]
        bias: BiasPolicy,
    },
    /// Two 5×5 convolutions with pooling, then a dense feature layer.
    Cnn {
        channels: usize,
        feature: usize,
        norm: NormMode,
        #[serde(default = "no_bias")]
        bias: BiasPolicy,
    },
    ResidualMlp {
        width: usize,
        blocks: usize,
        variant: ResidualVariant,
        norm: NormMode,
        #[serde(default = "default_bias")]
        bias: BiasPolicy,
    },
}

fn default_bias() -> BiasPolicy {
    BiasPolicy::FirstLayerOnly
}

fn no_bias() -> BiasPolicy {
    BiasPolicy::None
}

impl ModelConfig {
    pub fn norm(&self) -> NormMode {
        match self {
            ModelConfig::Mlp { norm, .. } | ModelConfig::Cnn { norm, .. } | ModelConfig::ResidualMlp { norm, .. } => {
                *norm
            }
        }
    }

    /// Network for samples of shape `input_shape` and `classes` labels.
    pub fn network(&self, input_shape: &[usize], classes: usize) -> Result<NetworkSpec> {
        let flat: usize = input_shape.iter().product();
        let spec = match self {
            ModelConfig::Mlp { hidden, norm, bias } => {
                if hidden.is_empty() {
                    return Err(Error::config("model.hidden", "needs at least one layer"));
                }
                NetworkSpec::mlp(flat, hidden, classes, *norm).with_bias_policy(*bias)
            }
            ModelConfig::Cnn {
                channels,
                feature,
                norm,
                bias,
            } => {
                let shape: [usize; 3] = match input_shape {
                    [c, h, w] => [*c, *h, *w],
                    [h, w] => [1, *h, *w],
                    _ => {
                        return Err(Error::config(
                            "model.arch",
                            format!("cnn needs image samples, got shape {input_shape:?}"),
                        ))
                    }
                };
                if shape[1] < 16 || shape[2] < 16 {
                    return Err(Error::config("model.arch", "cnn needs images of at least 16×16"));
                }
                NetworkSpec::cnn_sized(shape, *channels, *feature, classes, *norm).with_bias_policy(*bias)
            }
            ModelConfig::ResidualMlp {
                width,
                blocks,
                variant,
                norm,
                bias,
            } => NetworkSpec::residual_mlp(flat, *width, *blocks, *variant, classes, *norm).with_bias_policy(*bias),
        };
        spec.validate_assumption_one()
            .map_err(|e| Error::config("model.bias", e.to_string()))?;
        Ok(spec)
    }
}

impl ExperimentConfig {
    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<document>", e.message()))?;
        Self::from_table(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Loads `path` (or the shipped default) and applies `key=value`
    /// overrides in order before validation.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?,
            None => DEFAULT_CONFIG.to_string(),
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<document>", e.message()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".into() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::GaussianMixture {
                classes,
                dim,
                train_per_class,
                test_per_class,
                separation,
            } => {
                if *classes < 2 {
                    return Err(Error::config("dataset.classes", "need at least 2"));
                }
                if *dim < 2 {
                    return Err(Error::config("dataset.dim", "need at least 2"));
                }
                if *train_per_class == 0 {
                    return Err(Error::config("dataset.train_per_class", "must be positive"));
                }
                if *test_per_class == 0 {
                    return Err(Error::config("dataset.test_per_class", "must be positive"));
                }
                if !(separation.is_finite() && *separation >= 0.0) {
                    return Err(Error::config("dataset.separation", "must be finite and non-negative"));
                }
            }
            DatasetConfig::Csv { classes, .. } if *classes < 2 => {
                return Err(Error::config("dataset.classes", "need at least 2"));
            }
            _ => {}
        }
        if self.partition.clients == 0 {
            return Err(Error::config("partition.clients", "must be positive"));
        }
        match self.partition.scheme {
            PartitionScheme::NClass { n: 0 } => {
                return Err(Error::config("partition.scheme.n", "must be positive"));
            }
            PartitionScheme::Dirichlet { beta } if !(beta > 0.0 && beta.is_finite()) => {
                return Err(Error::config("partition.scheme.beta", "must be positive"));
            }
            _ => {}
        }
        let f = &self.federation;
        f.algorithm
            .validate()
            .map_err(|e| Error::config("federation.algorithm", e.to_string()))?;
        for (key, v) in [
            ("federation.local_steps", f.local_steps),
            ("federation.batch_size", f.batch_size),
            ("federation.rounds", f.rounds),
            ("federation.eval_every", f.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(f.lr > 0.0 && f.lr.is_finite()) {
            return Err(Error::config("federation.lr", "must be positive"));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::config("federation.participation", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("shipped config is valid")
    }
}

/// Applies `a.b.c=value` to a TOML table. The value is read as a TOML
/// literal when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty path segment"));
    }
    let (leaf, parents) = parts.split_last().expect("split yields one part");
    let mut node = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(parts[..=i].join("."), "is not a table"))?;
    }
    node.insert(leaf.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.render().unwrap()).unwrap(), c);
    }

    #[test]
    fn override_sets_nested_values() {
        let c = ExperimentConfig::load_with_overrides(
            None,
            &[
                "federation.lr=0.1".into(),
                "model.norm=ln_reduced".into(),
                "partition.scheme={ kind = \"dirichlet\", beta = 0.5 }".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.federation.lr, 0.1);
        assert_eq!(c.model.norm(), NormMode::LnReduced);
        assert_eq!(c.partition.scheme, PartitionScheme::Dirichlet { beta: 0.5 });
    }

    #[test]
    fn errors_name_the_key() {
        let err = ExperimentConfig::load_with_overrides(None, &["federation.lr=-1".into()]).unwrap_err();
        assert!(err.to_string().contains("federation.lr"), "{err}");
        let err = ExperimentConfig::load_with_overrides(None, &["federation.lr=\"fast\"".into()]).unwrap_err();
        assert!(err.to_string().contains("federation.lr"), "{err}");
        let err = ExperimentConfig::load_with_overrides(None, &["model.depth=3".into()]).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
    }
}
