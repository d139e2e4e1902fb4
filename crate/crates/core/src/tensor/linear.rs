use super::Tensor;
use crate::error::{Error, Result};

/// Strided view of a row-major or transposed matrix for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with `c` row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the borrowed
    // slices (callers pass shapes derived from checked tensor shapes).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x · wᵀ` for `x: [B, k]` and `w: [n, k]`, returning `[B, n]`.
pub fn matmul_nt(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, k) = as_matrix(x)?;
    let [n, kw] = w.shape()[..] else {
        return Err(Error::shape("weight must be 2-d"));
    };
    if k != kw {
        return Err(Error::shape(format!(
            "input width {k} does not match weight width {kw}"
        )));
    }
    let mut out = vec![0.0; b * n];
    gemm(
        b,
        k,
        n,
        1.0,
        MatRef::rows(x.data(), k),
        MatRef::transposed(w.data(), k),
        0.0,
        &mut out,
    );
    Tensor::new(vec![b, n], out)
}

/// Batched affine map `x · Uᵀ + b` over rows of `x`.
pub(crate) fn affine_batch(x: &Tensor, u: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let mut out = matmul_nt(x, u)?;
    if let Some(bias) = bias {
        let n = u.shape()[0];
        if bias.len() != n {
            return Err(Error::shape(format!(
                "bias length {} does not match output width {n}",
                bias.len()
            )));
        }
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
    }
    Ok(out)
}

/// Gradients of the batched affine map: `(dx, du, db)`.
pub(crate) fn affine_backward(
    x: &Tensor,
    u: &Tensor,
    dy: &Tensor,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (b, k) = (x.batch(), x.row_len());
    let n = u.shape()[0];
    let mut dx = vec![0.0; b * k];
    gemm(
        b,
        n,
        k,
        1.0,
        MatRef::rows(dy.data(), n),
        MatRef::rows(u.data(), k),
        0.0,
        &mut dx,
    );
    let mut du = vec![0.0; n * k];
    gemm(
        n,
        b,
        k,
        1.0,
        MatRef::transposed(dy.data(), n),
        MatRef::rows(x.data(), k),
        0.0,
        &mut du,
    );
    let db = with_bias.then(|| {
        let mut acc = vec![0.0; n];
        for row in dy.data().chunks_exact(n) {
            for (a, g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
        Tensor::from_vec(acc)
    });
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
        Tensor::new(u.shape().to_vec(), du).expect("du shape"),
        db,
    )
}

/// Single-vector affine map `U x + b`.
pub fn affine_forward(u: &Tensor, x: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [d_out, d_in] = u.shape()[..] else {
        return Err(Error::shape("U must be 2-d"));
    };
    if x.len() != d_in || x.rank() != 1 {
        return Err(Error::shape(format!(
            "x must be a vector of length {d_in}, got {:?}",
            x.shape()
        )));
    }
    let row = x.clone().reshape(vec![1, d_in])?;
    let out = affine_batch(&row, u, b)?;
    out.reshape(vec![d_out])
}

fn as_matrix(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "expected a batched input, got {:?}",
            x.shape()
        )));
    }
    Ok((x.batch(), x.row_len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_and_zero_weight_cases() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(vec![3.0, -1.0]);
        assert_eq!(affine_forward(&eye, &x, None).unwrap().data(), &[3.0, -1.0]);

        let zero = Tensor::zeros(&[2, 2]);
        let x = Tensor::from_vec(vec![5.0, 7.0]);
        let b = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(
            affine_forward(&zero, &x, Some(&b)).unwrap().data(),
            &[1.0, 2.0]
        );
    }

    #[test]
    fn random_case_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (bsz, k, n) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..7));
            let x: Vec<f64> = (0..bsz * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let xt = Tensor::new(vec![bsz, k], x.clone()).unwrap();
            let ut = Tensor::new(vec![n, k], u.clone()).unwrap();
            let bt = Tensor::from_vec(b.clone());
            let got = affine_batch(&xt, &ut, Some(&bt)).unwrap();
            for r in 0..bsz {
                for j in 0..n {
                    let mut acc = b[j];
                    for p in 0..k {
                        acc += u[j * k + p] * x[r * k + p];
                    }
                    assert!((got.data()[r * n + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let u = Tensor::zeros(&[2, 3]);
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(affine_forward(&u, &x, None).is_err());
    }
}
