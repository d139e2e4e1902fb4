use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Isotropic Gaussian classes `N(μ_c, I)`.
///
/// With `C ≤ dim` the means are `separation/√2` times orthonormal random
/// directions, so every pair sits exactly `separation` apart. With more
/// classes than dimensions the directions are random unit vectors and the
/// spacing is only approximate.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if classes < 2 || dim < 2 {
            return Err(Error::invalid("a mixture needs C ≥ 2 and dim ≥ 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let radius = separation / std::f64::consts::SQRT_2;
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while dirs.len() < classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            if dirs.len() < dim {
                for d in &dirs {
                    let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let n = crate::norm::l2_norm(&v);
            if n < 1e-8 {
                continue;
            }
            dirs.push(v.into_iter().map(|t| t / n).collect());
        }
        let means = dirs
            .into_iter()
            .map(|d| d.into_iter().map(|t| radius * t).collect())
            .collect();
        Ok(Self { means })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `n_per_class` samples of each class, class-major order.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        let (c, d) = (self.classes(), self.dim());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let mut data = Vec::with_capacity(c * n_per_class * d);
        let mut labels = Vec::with_capacity(c * n_per_class);
        for (class, mu) in self.means.iter().enumerate() {
            for _ in 0..n_per_class {
                data.extend(mu.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
                labels.push(class);
            }
        }
        Dataset::new(Tensor::new(vec![c * n_per_class, d], data)?, labels, c)
    }
}

/// One-shot mixture generation; means and samples both follow `seed`.
pub fn generate_gaussian_mixture(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    GaussianMixture::new(classes, dim, separation, seed)?.sample(n_per_class, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_are_separation_apart() {
        let g = GaussianMixture::new(5, 8, 6.0, 3).unwrap();
        for a in 0..5 {
            for b in 0..a {
                let d: f64 = g.means[a].iter().zip(&g.means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                assert!((d.sqrt() - 6.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = generate_gaussian_mixture(3, 10, 4, 2.0, 11).unwrap();
        let b = generate_gaussian_mixture(3, 10, 4, 2.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.histogram(), vec![10, 10, 10]);
    }
}
