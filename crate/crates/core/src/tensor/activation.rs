use serde::{Deserialize, Serialize};

/// Positively homogeneous two-piece linear activation:
/// `pos * t` for `t > 0` and `neg * t` for `t <= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum Activation {
    #[default]
    Relu,
    LeakyRelu { pos: f64, neg: f64 },
}


impl Activation {
    /// `(pos, neg)` slopes.
    pub fn slopes(self) -> (f64, f64) {
        match self {
            Activation::Relu => (1.0, 0.0),
            Activation::LeakyRelu { pos, neg } => (pos, neg),
        }
    }

    #[inline]
    pub fn apply(self, t: f64) -> f64 {
        let (a, b) = self.slopes();
        if t > 0.0 {
            a * t
        } else {
            b * t
        }
    }

    /// Derivative, taking the `t <= 0` branch at the kink.
    #[inline]
    pub fn derivative(self, t: f64) -> f64 {
        let (a, b) = self.slopes();
        if t > 0.0 {
            a
        } else {
            b
        }
    }

    pub fn forward(self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&t| self.apply(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_and_leaky_examples() {
        assert_eq!(Activation::Relu.forward(&[-1.0, 2.0]), vec![0.0, 2.0]);
        let leaky = Activation::LeakyRelu { pos: 1.0, neg: 0.1 };
        assert_eq!(leaky.forward(&[-10.0, 10.0]), vec![-1.0, 10.0]);
        assert_eq!(Activation::Relu.apply(0.0), 0.0);
        assert_eq!(leaky.apply(0.0), 0.0);
    }

    proptest! {
        #[test]
        fn positive_homogeneity(t in -100.0f64..100.0, lambda in 1e-6f64..10.0,
                                a in -3.0f64..3.0, b in -3.0f64..3.0) {
            for act in [Activation::Relu, Activation::LeakyRelu { pos: a, neg: b }] {
                let lhs = act.apply(lambda * t);
                let rhs = lambda * act.apply(t);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }
}
