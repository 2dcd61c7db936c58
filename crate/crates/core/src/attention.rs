//! Non-local self-attention over the spatial locations of a feature map.
//!
//! For input `x ∈ R^{C×N}`: `q = W_q x`, `k = W_k x`, `v = W_v x`;
//! `α_{j,i} = softmax_i(k_iᵀ q_j)`; `o_j = Σ_i α_{j,i} v_i`; output `μ·o + x`.
//! `W_q`, `W_k` map C → C/8 and `W_v` is C × C so the residual sum is well formed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[C/8, C]`
    pub w_q: Tensor,
    /// `[C/8, C]`
    pub w_k: Tensor,
    /// `[C, C]`
    pub w_v: Tensor,
    pub mu: f64,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, mu: f64) -> Result<Self> {
        let p = Self { w_q, w_k, w_v, mu };
        p.validate()?;
        Ok(p)
    }

    /// Channel count `C`.
    pub fn channels(&self) -> usize {
        self.w_v.shape().first().copied().unwrap_or(0)
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels() / 8
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c < 8 || !c.is_multiple_of(8) {
            return Err(Error::InvalidParams(format!(
                "attention channels must be a positive multiple of 8 (got {c})"
            )));
        }
        let cbar = c / 8;
        self.w_q.expect_shape(&[cbar, c], "w_q")?;
        self.w_k.expect_shape(&[cbar, c], "w_k")?;
        self.w_v.expect_shape(&[c, c], "w_v")?;
        if !self.mu.is_finite() {
            return Err(Error::InvalidParams("mu must be finite".into()));
        }
        Ok(())
    }
}

/// `W · X` for `W: [r, c]`, `X: [c, n]`, returned transposed as `[n, r]`.
fn project_t(w: &Tensor, x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let r = w.shape()[0];
    let wd = w.data();
    let mut out = vec![0.0; n * r];
    out.par_chunks_mut(r).enumerate().for_each(|(loc, row)| {
        for (o, slot) in row.iter_mut().enumerate() {
            let wrow = &wd[o * c..(o + 1) * c];
            *slot = wrow.iter().enumerate().map(|(ch, wv)| wv * x[ch * n + loc]).sum();
        }
    });
    out
}

fn check_input(x: &Tensor, p: &AttentionParams) -> Result<(usize, usize)> {
    p.validate()?;
    let c = p.channels();
    match x.shape() {
        [xc, n] if *xc == c && *n >= 1 => Ok((c, *n)),
        s => Err(Error::ShapeMismatch(format!(
            "attention input must be [{c}, n >= 1], got {s:?}"
        ))),
    }
}

/// Average-pools a `[c, h*w]` map by `factor` (remainder rows/cols dropped).
fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, factor: usize) -> (Vec<f64>, usize) {
    let (ph, pw) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for py in 0..ph {
            for px in 0..pw {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += x[ch * h * w + (py * factor + dy) * w + px * factor + dx];
                    }
                }
                out[ch * ph * pw + py * pw + px] = acc * scale;
            }
        }
    }
    (out, ph * pw)
}

/// Queries from `x` (`[c, n]`), keys and values from `kv` (`[c, m]`).
fn attend(
    x: &[f64],
    n: usize,
    kv: &[f64],
    m: usize,
    p: &AttentionParams,
) -> Vec<f64> {
    let c = p.channels();
    let cbar = p.reduced_channels();
    let q = project_t(&p.w_q, x, c, n);
    let k = project_t(&p.w_k, kv, c, m);
    let v = project_t(&p.w_v, kv, c, m);
    // o in [n, c] layout, transposed at the end
    let mut o = vec![0.0; n * c];
    o.par_chunks_mut(c).enumerate().for_each(|(j, oj)| {
        let alpha = softmax_row(&q[j * cbar..(j + 1) * cbar], &k, cbar, m);
        for (i, a) in alpha.iter().enumerate() {
            let vi = &v[i * c..(i + 1) * c];
            for (acc, vv) in oj.iter_mut().zip(vi) {
                *acc += a * vv;
            }
        }
    });
    let mut out = x.to_vec();
    for ch in 0..c {
        for j in 0..n {
            out[ch * n + j] += p.mu * o[j * c + ch];
        }
    }
    out
}

fn softmax_row(qj: &[f64], k: &[f64], cbar: usize, m: usize) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..m)
        .map(|i| {
            k[i * cbar..(i + 1) * cbar]
                .iter()
                .zip(qj)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    logits
}

pub fn attention_forward(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (c, n) = check_input(x, p)?;
    if p.mu == 0.0 {
        return Ok(x.clone());
    }
    Tensor::new(vec![c, n], attend(x.data(), n, x.data(), n, p))
}

/// Attention on a `[c, h, w]` feature map. With `pool > 1` keys and values
/// come from the map average-pooled by `pool`, which shrinks the attention
/// matrix to `N × N/pool²`.
pub fn attention_forward_spatial(x: &Tensor, p: &AttentionParams, pool: usize) -> Result<Tensor> {
    let [c, h, w] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::ShapeMismatch(format!("expected [c, h, w], got {s:?}"))),
    };
    if pool == 0 {
        return Err(Error::InvalidParams("pool factor must be >= 1".into()));
    }
    let flat = x.clone().reshape(vec![c, h * w])?;
    check_input(&flat, p)?;
    if p.mu == 0.0 {
        return Ok(x.clone());
    }
    let n = h * w;
    let out = if pool == 1 || h < pool || w < pool {
        attend(x.data(), n, x.data(), n, p)
    } else {
        let (kv, m) = avg_pool(x.data(), c, h, w, pool);
        attend(x.data(), n, &kv, m, p)
    };
    Tensor::new(vec![c, h, w], out)
}

/// The `[n, n]` matrix `α` with `α[j][i]` the weight location `j` puts on `i`.
pub fn attention_map(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let (c, n) = check_input(x, p)?;
    let cbar = p.reduced_channels();
    let q = project_t(&p.w_q, x.data(), c, n);
    let k = project_t(&p.w_k, x.data(), c, n);
    let data: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|j| softmax_row(&q[j * cbar..(j + 1) * cbar], &k, cbar, n))
        .collect();
    Tensor::new(vec![n, n], data)
}
