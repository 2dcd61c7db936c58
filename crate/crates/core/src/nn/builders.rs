//! Deterministic weight sets for tests, demos and the reference archive.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::arch::{NetworkArch, NormKind, Parts, TensorRole};
use super::ops::NORM_EPS;
use super::spectral;
use super::weights::{GeneratorWeights, WeightTensor};

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, name: &str, shape: &[usize], mu: f64) -> WeightTensor {
    let n: usize = shape.iter().product();
    let role = TensorRole::of(name);
    let mut data = if role.is_spectral() {
        uniform(rng, n, -1.0, 1.0)
    } else if name.ends_with(".attn.mu") {
        vec![mu]
    } else if name.ends_with(".norm.weight") {
        uniform(rng, n, 0.8, 1.2)
    } else if name.ends_with(".norm.running_var") {
        uniform(rng, n, 0.5, 1.5)
    } else {
        uniform(rng, n, -0.1, 0.1)
    };
    if role.is_spectral() {
        spectral::normalize_in_place(role, shape, &mut data);
    }
    WeightTensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect()).expect("manifest shape")
}

/// Random weights satisfying every load-time invariant, with all attention
/// gains set to `mu`.
pub fn random_weights(arch: NetworkArch, parts: Parts, seed: u64, mu: f64) -> Result<GeneratorWeights> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .manifest(parts)
        .into_iter()
        .map(|(name, shape)| {
            let t = random_tensor(&mut rng, &name, &shape, mu);
            (name, t)
        })
        .collect();
    GeneratorWeights::new(arch, tensors)
}

/// Piecewise-linear units `relu(sign·x − t)` used to rebuild the identity.
const HINGES: [(f64, f64); 5] = [(1.0, -1.0), (1.0, 0.7), (-1.0, 0.7), (1.0, 0.9), (-1.0, 0.9)];
/// Pre-activation targets are clipped here so the fit stays finite at ±1.
const ATANH_CLIP: f64 = 0.99;

/// Least-squares fit of `b + Σ w_h·relu(s_h·x − t_h) ≈ atanh(x)` over every
/// representable 8-bit input.
fn fit_hinges(k: usize) -> (f64, Vec<f64>) {
    let xs: Vec<f64> = (0..=255).map(|v| v as f64 / 127.5 - 1.0).collect();
    let a = DMatrix::from_fn(xs.len(), k + 1, |r, c| {
        if c == 0 {
            1.0
        } else {
            let (s, t) = HINGES[c - 1];
            (s * xs[r] - t).max(0.0)
        }
    });
    let b = DVector::from_iterator(xs.len(), xs.iter().map(|x| x.clamp(-ATANH_CLIP, ATANH_CLIP).atanh()));
    let sol = a.svd(true, true).solve(&b, 1e-12).expect("svd solve with both factors");
    (sol[0], sol.iter().skip(1).copied().collect())
}

/// A generator whose output approximates its input through the outermost
/// skip connection.
///
/// Encoder level 0 copies each pixel phase of each color channel into a few
/// hinge units; the output layer recombines them into `atanh(x)` so that the
/// final `tanh` returns `x`. Inner blocks carry random spectrally-normalized
/// weights that the output layer ignores, and every attention gain is 0.
/// Requires batch normalization and at least 12 base channels.
pub fn identity_generator(arch: NetworkArch, parts: Parts, seed: u64) -> Result<GeneratorWeights> {
    if arch.norm != NormKind::Batch || arch.base_channels < 12 {
        return Err(Error::InvalidParams(
            "identity generator needs batch norm and base_channels >= 12".into(),
        ));
    }
    let random = random_weights(arch, parts, seed, 0.0)?;
    let mut tensors: BTreeMap<String, WeightTensor> = random.into_tensors();

    let c0 = arch.channels(0);
    let k = (c0 / 12).min(HINGES.len());
    let scale = 1.0 / (k as f64).sqrt();
    let (offset, w) = fit_hinges(k);
    let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    // Norm gain chosen so the output layer's spectral norm is exactly 1.
    let gain = 2.0 * wnorm / scale;

    let mut conv = vec![0.0f32; c0 * 3 * 16];
    let mut bias = vec![0.0f32; c0];
    let mut out_w = vec![0.0f32; 2 * c0 * 3 * 16];
    for phase in 0..4 {
        let (a, b) = (phase / 2, phase % 2);
        let tap = (a + 1) * 4 + (b + 1);
        for color in 0..3 {
            for (h, &(s, t)) in HINGES.iter().take(k).enumerate() {
                let j = (phase * 3 + color) * k + h;
                conv[(j * 3 + color) * 16 + tap] = (s * scale) as f32;
                bias[j] = (-t * scale) as f32;
                out_w[((c0 + j) * 3 + color) * 16 + tap] = (w[h] / (gain * scale)) as f32;
            }
        }
    }
    let mut set = |name: &str, shape: Vec<usize>, data: Vec<f32>| {
        tensors.insert(name.to_string(), WeightTensor::new(shape, data).expect("shape"));
    };
    set("gen.enc0.conv.weight", vec![c0, 3, 4, 4], conv);
    set("gen.enc0.conv.bias", vec![c0], bias);
    set("gen.enc0.norm.weight", vec![c0], vec![gain as f32; c0]);
    set("gen.enc0.norm.bias", vec![c0], vec![0.0; c0]);
    set("gen.enc0.norm.running_mean", vec![c0], vec![0.0; c0]);
    set("gen.enc0.norm.running_var", vec![c0], vec![(1.0 - NORM_EPS) as f32; c0]);
    set("gen.out.deconv.weight", vec![2 * c0, 3, 4, 4], out_w);
    set("gen.out.deconv.bias", vec![3], vec![offset as f32; 3]);
    GeneratorWeights::new(arch, tensors)
}
