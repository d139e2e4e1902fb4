use super::Tensor;
use crate::error::{Error, Result};

/// Plain SGD: `p ← p − lr·g` for every tensor pair.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    check(params, grads, lr)?;
    for (p, g) in params.iter_mut().zip(grads) {
        p.add_scaled(-lr, g)?;
    }
    Ok(())
}

fn check(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
    }
    Ok(())
}

/// Heavy-ball SGD, `v ← μv + g`, `p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl MomentumSgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check(params, grads, lr)?;
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            p.add_scaled(-lr, v)?;
        }
        Ok(())
    }
}
