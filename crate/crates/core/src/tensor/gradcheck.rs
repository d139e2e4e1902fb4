//! Central finite-difference gradient oracle.

use super::{BranchSignature, Tensor};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Check at most this many coordinates, chosen by `seed`; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: None,
            seed: 0,
            abs_floor: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose ±step evaluations straddle an activation kink or
    /// pooling switch; these are excluded from `max_rel_err`.
    pub kinks_excluded: usize,
    /// `(tensor, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// `f` returns the loss and the branch signature of its forward pass.
pub fn finite_diff_check<F>(
    params: &[Tensor],
    analytic: &[Tensor],
    mut f: F,
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, BranchSignature)>,
{
    if params.len() != analytic.len()
        || params.iter().zip(analytic).any(|(p, g)| p.shape() != g.shape())
    {
        return Err(Error::shape("analytic gradients do not match parameters"));
    }
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_coords {
        Some(m) if m < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = rand::seq::index::sample(&mut rng, coords.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let (_, base_sig) = f(params)?;
    let mut work = params.to_vec();
    let mut report = FdReport::default();
    for (t, i) in chosen {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + opts.step;
        let (lp, sp) = f(&work)?;
        work[t].data_mut()[i] = orig - opts.step;
        let (lm, sm) = f(&work)?;
        work[t].data_mut()[i] = orig;
        if sp != base_sig || sm != base_sig {
            report.kinks_excluded += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * opts.step);
        let a = analytic[t].data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((t, i, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quadratic_is_exact() {
        let p = vec![Tensor::from_vec(vec![0.3, -1.2, 2.0])];
        let eval = |ps: &[Tensor]| -> Result<(f64, BranchSignature, Vec<Tensor>)> {
            let mut tape = Tape::new();
            let x = tape.leaf(ps[0].clone())?;
            let l = tape.half_sum_squares(x)?;
            let sig = tape.branch_signature();
            let v = tape.value(l).item();
            let g = tape.backward(l)?;
            Ok((v, sig, vec![g.get(x).unwrap().clone()]))
        };
        let (_, _, grads) = eval(&p).unwrap();
        let r = finite_diff_check(&p, &grads, |ps| eval(ps).map(|(v, s, _)| (v, s)), &FdOptions::default())
            .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }
}
