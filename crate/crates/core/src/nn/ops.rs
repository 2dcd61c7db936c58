//! CPU reference layers on `[c, h, w]` feature maps.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KERNEL: usize = 4;
pub const PADDING: usize = 1;
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

fn chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::ShapeMismatch(format!("expected [c, h, w], got {s:?}"))),
    }
}

/// Cross-correlation, `weight: [out, in, k, k]`, zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin, h, w) = chw(x)?;
    let [cout, wcin, kh, kw] = match weight.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => return Err(Error::ShapeMismatch(format!("conv weight must be rank 4, got {s:?}"))),
    };
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!("conv expects {wcin} input channels, got {cin}")));
    }
    bias.expect_shape(&[cout], "conv bias")?;
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch(format!("input {h}x{w} smaller than kernel")));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; cout * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(co, plane)| {
        plane.fill(bias.data()[co]);
        for ci in 0..cin {
            let xin = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wt = wd[((co * cin + ci) * kh + ky) * kw + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wt * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![cout, ho, wo], out)
}

/// Transposed convolution, `weight: [in, out, k, k]`;
/// output side `(n − 1)·stride − 2·pad + k`.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (cin, h, w) = chw(x)?;
    let [wcin, cout, kh, kw] = match weight.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => return Err(Error::ShapeMismatch(format!("deconv weight must be rank 4, got {s:?}"))),
    };
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!("deconv expects {wcin} input channels, got {cin}")));
    }
    bias.expect_shape(&[cout], "deconv bias")?;
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (w - 1) * stride + kw - 2 * pad;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; cout * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(co, plane)| {
        plane.fill(bias.data()[co]);
        for ci in 0..cin {
            let xin = &xd[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wt = wd[((ci * cout + co) * kh + ky) * kw + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    for iy in 0..h {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy as usize * wo..(oy as usize + 1) * wo];
                        for (ix, v) in row.iter().enumerate() {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox >= 0 && ox < wo as isize {
                                orow[ox as usize] += wt * v;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![cout, ho, wo], out)
}

/// Per-channel `γ·(x − μ)/√(σ² + ε) + β` with fixed statistics.
pub fn batch_norm(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    if [gamma.len(), beta.len(), mean.len(), var.len()].iter().any(|&n| n != c) {
        return Err(Error::ShapeMismatch(format!("batch norm parameters must have {c} entries")));
    }
    let mut out = x.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let scale = gamma[ch] / (var[ch] + NORM_EPS).sqrt();
        for v in plane {
            *v = (*v - mean[ch]) * scale + beta[ch];
        }
    }
    Ok(out)
}

/// Normalizes each channel by its own spatial mean and biased variance.
pub fn instance_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (c, h, w) = chw(x)?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch(format!("instance norm parameters must have {c} entries")));
    }
    let n = (h * w) as f64;
    let mut out = x.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = gamma[ch] / (var + NORM_EPS).sqrt();
        for v in plane {
            *v = (*v - mean) * scale + beta[ch];
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = chw(a)?;
    let (cb, hb, wb) = chw(b)?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate {ha}x{wa} with {hb}x{wb}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stride_two_halves_dims() {
        let x = Tensor::filled(vec![2, 16, 12], 1.0);
        let w = Tensor::filled(vec![3, 2, 4, 4], 0.1);
        let y = conv2d(&x, &w, &Tensor::zeros(vec![3]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 8, 6]);
        // interior output sees the full 4x4x2 window
        assert!((y.data()[6 + 1] - 3.2).abs() < 1e-12);
        let up = conv_transpose2d(&y, &Tensor::filled(vec![3, 2, 4, 4], 0.1), &Tensor::zeros(vec![2]), 2, 1).unwrap();
        assert_eq!(up.shape(), &[2, 16, 12]);
    }

    #[test]
    fn discriminator_tail_dims() {
        // 256 -> 128 -> 64 -> 32 with stride 2, then 31 with stride 1
        let mut side = 256;
        for _ in 0..3 {
            side = (side + 2 - 4) / 2 + 1;
        }
        assert_eq!(side, 32);
        assert_eq!(side + 2 - 4 + 1, 31);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for the same kernel
        let x = Tensor::new(vec![2, 6, 6], (0..72).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let k = Tensor::new(vec![3, 2, 4, 4], (0..96).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let cx = conv2d(&x, &k, &Tensor::zeros(vec![3]), 2, 1).unwrap();
        let y = Tensor::new(cx.shape().to_vec(), (0..cx.len()).map(|i| (i as f64 * 0.23).sin()).collect()).unwrap();
        // conv weight [out=3, in=2] is a transposed-conv weight [in=3, out=2]
        let ty = conv_transpose2d(&y, &k, &Tensor::zeros(vec![2]), 2, 1).unwrap();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn norms() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = instance_norm(&x, &[1.0], &[0.0]).unwrap();
        assert!(y.data().iter().sum::<f64>().abs() < 1e-12);
        let z = batch_norm(&x, &[2.0], &[1.0], &[1.0], &[1.0 - NORM_EPS]).unwrap();
        assert!((z.data()[3] - 7.0).abs() < 1e-9);
    }
}
