use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::{DEFAULT_BN_MOMENTUM, DEFAULT_EPSILON};
use crate::tensor::Activation;

/// Inner wiring of a residual MLP block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualVariant {
    /// `ρ(x + A₂ ρ(A₁ x))`
    Plain,
    /// `n_MV ρ(x + A₂ n_MV ρ(A₁ x))`
    LnInner,
    /// `s ρ(x + A₂ n_MV ρ(A₁ x))`
    LnShift,
    /// `ρ(x + A₂ n_MV ρ(A₁ x))`
    FnInnerMv,
    /// `ρ(x + A₂ n ρ(A₁ x))`
    FnInnerScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerSpec {
    /// Accepts any input whose flattened width is `d_in`.
    Dense { d_in: usize, d_out: usize },
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool { window: usize, stride: usize },
    Flatten,
    Residual { dim: usize, variant: ResidualVariant },
}

impl LayerSpec {
    /// Dense, convolutional and residual layers carry an activation and the
    /// network-level normalization; pooling and flattening are structural.
    pub fn is_hidden(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } | LayerSpec::Residual { .. }
        )
    }
}

/// Where normalization sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NormMode {
    None,
    /// Scale normalization after every activation.
    FnLayerwise,
    /// Scale normalization of the feature only.
    FnLast,
    /// MV normalization after every activation.
    LnLayerwise,
    /// Mean shift after inner activations, MV normalization of the feature.
    LnReduced,
    /// MV normalization before every activation.
    LnPre,
    /// `γ ⊙ n_MV + β` after every activation.
    LnLearnable,
    Gn { groups: usize },
    Bn,
}

impl NormMode {
    /// Modes whose reductions rely on scale equivariance of inner layers.
    pub fn needs_assumption_one(self) -> bool {
        matches!(
            self,
            NormMode::FnLayerwise | NormMode::FnLast | NormMode::LnLayerwise | NormMode::LnReduced
        )
    }
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormMode::None => f.write_str("none"),
            NormMode::FnLayerwise => f.write_str("fn_layerwise"),
            NormMode::FnLast => f.write_str("fn_last"),
            NormMode::LnLayerwise => f.write_str("ln_layerwise"),
            NormMode::LnReduced => f.write_str("ln_reduced"),
            NormMode::LnPre => f.write_str("ln_pre"),
            NormMode::LnLearnable => f.write_str("ln_learnable"),
            NormMode::Gn { groups } => write!(f, "gn:{groups}"),
            NormMode::Bn => f.write_str("bn"),
        }
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => NormMode::None,
            "fn_layerwise" => NormMode::FnLayerwise,
            "fn_last" | "fn" => NormMode::FnLast,
            "ln_layerwise" | "ln" => NormMode::LnLayerwise,
            "ln_reduced" => NormMode::LnReduced,
            "ln_pre" => NormMode::LnPre,
            "ln_learnable" => NormMode::LnLearnable,
            "bn" => NormMode::Bn,
            other => match other.strip_prefix("gn:") {
                Some(g) => NormMode::Gn {
                    groups: g
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad group count in {other:?}")))?,
                },
                None => return Err(Error::invalid(format!("unknown norm mode {other:?}"))),
            },
        })
    }
}

impl TryFrom<String> for NormMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NormMode> for String {
    fn from(m: NormMode) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasPolicy {
    AllBiases,
    FirstLayerOnly,
    None,
}

/// Declarative network description. The classifier head `W` is implicit
/// and always bias-free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape, e.g. `[16]` or `[3, 32, 32]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub activation: Activation,
    pub norm_mode: NormMode,
    pub bias_policy: BiasPolicy,
    pub classes: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

impl NetworkSpec {
    /// Fully connected network `input → hidden[0] → … → hidden[L-1]`, the last
    /// width being the feature dimension.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, norm_mode: NormMode) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut d_in = input;
        for &d_out in hidden {
            layers.push(LayerSpec::Dense { d_in, d_out });
            d_in = d_out;
        }
        Self {
            input_shape: vec![input],
            layers,
            activation: Activation::Relu,
            norm_mode,
            bias_policy: BiasPolicy::FirstLayerOnly,
            classes,
            epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    /// Two 5×5 convolutions with 64 channels, each followed by 2×2 max
    /// pooling, then a dense layer to a 384-wide feature. Bias-free.
    pub fn cnn(classes: usize, norm_mode: NormMode) -> Self {
        Self::cnn_sized([3, 32, 32], 64, 384, classes, norm_mode)
    }

    /// [`NetworkSpec::cnn`] with configurable input, channel and feature sizes.
    pub fn cnn_sized(
        input: [usize; 3],
        channels: usize,
        feature: usize,
        classes: usize,
        norm_mode: NormMode,
    ) -> Self {
        let [c, h, w] = input;
        let side = |s: usize| ((s.saturating_sub(4)) / 2).saturating_sub(4) / 2;
        let flat = channels * side(h) * side(w);
        Self {
            input_shape: input.to_vec(),
            layers: vec![
                LayerSpec::Conv {
                    c_in: c,
                    c_out: channels,
                    kernel: 5,
                    stride: 1,
                },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Conv {
                    c_in: channels,
                    c_out: channels,
                    kernel: 5,
                    stride: 1,
                },
                LayerSpec::MaxPool { window: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    d_in: flat,
                    d_out: feature,
                },
            ],
            activation: Activation::Relu,
            norm_mode,
            bias_policy: BiasPolicy::None,
            classes,
            epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    /// Dense stem to `width`, `blocks` residual blocks, then the feature.
    pub fn residual_mlp(
        input: usize,
        width: usize,
        blocks: usize,
        variant: ResidualVariant,
        classes: usize,
        norm_mode: NormMode,
    ) -> Self {
        let mut spec = Self::mlp(input, &[width], classes, norm_mode);
        for _ in 0..blocks {
            spec.layers.push(LayerSpec::Residual { dim: width, variant });
        }
        spec
    }

    pub fn with_bias_policy(mut self, policy: BiasPolicy) -> Self {
        self.bias_policy = policy;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_norm_mode(mut self, mode: NormMode) -> Self {
        self.norm_mode = mode;
        self
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_hidden()).count()
    }

    /// Checks the bias-free-inner-layer requirement of the reducible modes.
    pub fn validate_assumption_one(&self) -> Result<()> {
        if self.norm_mode.needs_assumption_one() && self.bias_policy == BiasPolicy::AllBiases {
            return Err(Error::InvalidSpec(format!(
                "norm mode {} requires bias-free layers after the first",
                self.norm_mode
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_mode_round_trips_through_strings() {
        for m in [
            NormMode::None,
            NormMode::FnLayerwise,
            NormMode::FnLast,
            NormMode::LnLayerwise,
            NormMode::LnReduced,
            NormMode::LnPre,
            NormMode::LnLearnable,
            NormMode::Gn { groups: 4 },
            NormMode::Bn,
        ] {
            assert_eq!(m.to_string().parse::<NormMode>().unwrap(), m);
        }
        assert!("gn:x".parse::<NormMode>().is_err());
    }

    #[test]
    fn default_cnn_flattens_to_1600() {
        let s = NetworkSpec::cnn(10, NormMode::None);
        assert!(matches!(
            s.layers[5],
            LayerSpec::Dense {
                d_in: 1600,
                d_out: 384
            }
        ));
    }
}
