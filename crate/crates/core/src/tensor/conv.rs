use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(x: &Tensor, kernel: &Tensor, stride: usize) -> Result<Self> {
        let [batch, c_in, h, w] = x.shape()[..] else {
            return Err(Error::shape(format!(
                "conv input must be [B, C, H, W], got {:?}",
                x.shape()
            )));
        };
        let [c_out, kc, k, k2] = kernel.shape()[..] else {
            return Err(Error::shape("kernel must be [C_out, C_in, k, k]"));
        };
        if kc != c_in || k != k2 {
            return Err(Error::shape(format!(
                "kernel {:?} incompatible with {c_in} input channels",
                kernel.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if k > h || k > w {
            return Err(Error::shape(format!(
                "kernel {k} larger than input {h}x{w}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            h_out: (h - k) / stride + 1,
            w_out: (w - k) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.c_out, self.h_out, self.w_out]
    }
}

pub(crate) fn conv2d_batch(
    x: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x, kernel, stride)?;
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::shape("conv bias length must equal output channels"));
        }
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; g.batch * g.c_out * g.h_out * g.w_out];
    let plane_out = g.h_out * g.w_out;
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let base_out = (n * g.c_out + co) * plane_out;
            let b0 = bias.map_or(0.0, |b| b.data()[co]);
            out[base_out..base_out + plane_out].fill(b0);
            for ci in 0..g.c_in {
                let xin = &xd[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                let ker = &kd[(co * g.c_in + ci) * g.k * g.k..][..g.k * g.k];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let mut acc = 0.0;
                        for ky in 0..g.k {
                            let row = &xin[(oy * g.stride + ky) * g.w + ox * g.stride..][..g.k];
                            let krow = &ker[ky * g.k..][..g.k];
                            for (a, b) in row.iter().zip(krow) {
                                acc += a * b;
                            }
                        }
                        out[base_out + oy * g.w_out + ox] += acc;
                    }
                }
            }
        }
    }
    Tensor::new(g.out_shape(), out)
}

/// Returns `(dx, dkernel, dbias)`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    dy: &Tensor,
    with_bias: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let g = ConvGeometry::new(x, kernel, stride).expect("geometry validated in forward");
    let (xd, kd, dyd) = (x.data(), kernel.data(), dy.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; g.c_out];
    let plane_out = g.h_out * g.w_out;
    for n in 0..g.batch {
        for co in 0..g.c_out {
            let gout = &dyd[(n * g.c_out + co) * plane_out..][..plane_out];
            if with_bias {
                db[co] += gout.iter().sum::<f64>();
            }
            for ci in 0..g.c_in {
                let xoff = (n * g.c_in + ci) * g.h * g.w;
                let koff = (co * g.c_in + ci) * g.k * g.k;
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        let gv = gout[oy * g.w_out + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..g.k {
                            let xrow = xoff + (oy * g.stride + ky) * g.w + ox * g.stride;
                            let krow = koff + ky * g.k;
                            for kx in 0..g.k {
                                dk[krow + kx] += gv * xd[xrow + kx];
                                dx[xrow + kx] += gv * kd[krow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("dx"),
        Tensor::new(kernel.shape().to_vec(), dk).expect("dk"),
        with_bias.then(|| Tensor::from_vec(db)),
    )
}

/// Max pooling; also returns, per output element, the flat input index of the
/// first maximal element of its window in row-major order.
pub(crate) fn maxpool_batch(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let [batch, c, h, w] = x.shape()[..] else {
        return Err(Error::shape(format!(
            "pool input must be [B, C, H, W], got {:?}",
            x.shape()
        )));
    };
    if window == 0 || stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    let (h_out, w_out) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * c * h_out * w_out);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![batch, c, h_out, w_out], out)?, argmax))
}

/// Single-sample valid cross-correlation: `x: [C_in, H, W]` to `[C_out, H', W']`.
pub fn conv2d_forward(
    kernel: &Tensor,
    x: &Tensor,
    stride: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let out = conv2d_batch(&x.clone().reshape(shape)?, kernel, bias, stride)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

/// Single-sample max pooling: `x: [C, H, W]`.
pub fn maxpool2d_forward(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let (out, _) = maxpool_batch(&x.clone().reshape(shape)?, window, stride)?;
    let s = out.shape()[1..].to_vec();
    out.reshape(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_kernel_is_identity() {
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(conv2d_forward(&k, &x, 1, None).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv2d_forward(&k, &x, 1, None).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn oversized_kernel_is_an_error() {
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(conv2d_forward(&k, &x, 1, None).is_err());
        assert!(maxpool2d_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn random_conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (ci, co, h, w, k) = (2, 3, rng.random_range(4..8), rng.random_range(4..8), rng.random_range(1..4));
            let stride = rng.random_range(1..3);
            let x: Vec<f64> = (0..ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ker: Vec<f64> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let xt = Tensor::new(vec![ci, h, w], x.clone()).unwrap();
            let kt = Tensor::new(vec![co, ci, k, k], ker.clone()).unwrap();
            let y = conv2d_forward(&kt, &xt, stride, None).unwrap();
            let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += ker[((o * ci + c) * k + ky) * k + kx]
                                        * x[(c * h + oy * stride + ky) * w + ox * stride + kx];
                                }
                            }
                        }
                        assert!((y.data()[(o * ho + oy) * wo + ox] - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_examples_and_tie_rule() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2d_forward(&x, 2, 2).unwrap().data(), &[4.0]);

        let c = Tensor::full(&[1, 1, 4, 4], 5.0);
        let (y, arg) = maxpool_batch(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }

    #[test]
    fn random_maxpool_matches_direct_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, h, w) = (2, 6, 5);
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = maxpool2d_forward(&Tensor::new(vec![c, h, w], x.clone()).unwrap(), 2, 2).unwrap();
        let (ho, wo) = (3, 2);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let m = (0..4)
                        .map(|t| x[(ch * h + oy * 2 + t / 2) * w + ox * 2 + t % 2])
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.data()[(ch * ho + oy) * wo + ox], m);
                }
            }
        }
    }
}
