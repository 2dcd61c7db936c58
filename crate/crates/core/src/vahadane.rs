//! Vahadane stain separation by sparse non-negative matrix factorization.
//!
//! Minimizes `‖OD − V·S‖²_F + λ‖S‖₁` subject to `V, S ≥ 0` and unit-norm
//! columns of `V` by block coordinate descent. Each block is solved exactly:
//!
//! * `S` per pixel is a two-variable non-negative lasso, which reduces to a
//!   non-negative least-squares problem with a shifted right-hand side.
//! * each column `v_k` minimizes `‖R_k − v_k s_kᵀ‖²` on the unit sphere
//!   intersected with the non-negative orthant, whose solution is the
//!   normalized positive part of `R_k s_k`.
//!
//! Exact block minimization makes the objective non-increasing at every
//! iteration.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, ImageRole, Result};
use crate::imaging::RgbImage;
use crate::macenko::{stains_from_tissue, tissue_pixels, MacenkoParams};
use crate::optical_density::{dot, norm, rgb_to_od, solve_nonneg_pair, transfer_stains, OdConfig, StainMatrix, StainProfile};
use crate::stats::pairwise_sum;

/// Tissue pixels beyond this count are subsampled (seeded) before factorization.
pub const MAX_SAMPLES: usize = 40_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnmfParams {
    /// L1 penalty on the densities.
    pub sparsity_lambda: f64,
    pub max_iters: usize,
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub seed: u64,
    /// Background cutoff on the OD vector norm, as for Macenko.
    pub od_threshold: f64,
}

impl Default for SnmfParams {
    fn default() -> Self {
        Self {
            sparsity_lambda: 0.1,
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
            od_threshold: 0.15,
        }
    }
}

impl SnmfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity_lambda >= 0.0) || self.max_iters == 0 || !(self.tol > 0.0) || !(self.od_threshold > 0.0) {
            return Err(Error::InvalidParams(format!("invalid SNMF parameters {self:?}")));
        }
        Ok(())
    }
}

/// Result of one factorization run.
#[derive(Debug, Clone)]
pub struct SnmfFit {
    pub stains: StainMatrix,
    /// Objective after the initial density solve, then after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-pixel penalized residual `‖od − V s‖² + λ(s₀ + s₁)`.
fn pixel_objective(cols: &[[f64; 3]; 2], od: [f64; 3], s: [f64; 2], lambda: f64) -> f64 {
    let r = [0, 1, 2].map(|i| od[i] - cols[0][i] * s[0] - cols[1][i] * s[1]);
    dot(r, r) + lambda * (s[0] + s[1])
}

fn objective(cols: &[[f64; 3]; 2], od: &[[f64; 3]], s: &[[f64; 2]], lambda: f64) -> f64 {
    let terms: Vec<f64> = od
        .iter()
        .zip(s)
        .map(|(p, s)| pixel_objective(cols, *p, *s, lambda))
        .collect();
    pairwise_sum(&terms)
}

fn gram(cols: &[[f64; 3]; 2]) -> [[f64; 2]; 2] {
    let off = dot(cols[0], cols[1]);
    [[dot(cols[0], cols[0]), off], [off, dot(cols[1], cols[1])]]
}

/// Exact density update; a pixel keeps its old densities if rounding would
/// make the new ones worse.
fn update_densities(cols: &[[f64; 3]; 2], od: &[[f64; 3]], s: &mut [[f64; 2]], lambda: f64) {
    let g = gram(cols);
    let shift = lambda / 2.0;
    od.par_iter().zip(s.par_iter_mut()).for_each(|(p, s)| {
        let b = [dot(cols[0], *p) - shift, dot(cols[1], *p) - shift];
        let cand = solve_nonneg_pair(g, b);
        if pixel_objective(cols, *p, cand, lambda) <= pixel_objective(cols, *p, *s, lambda) {
            *s = cand;
        }
    });
}

fn update_stains(cols: &mut [[f64; 3]; 2], od: &[[f64; 3]], s: &[[f64; 2]]) {
    for k in 0..2 {
        let other = 1 - k;
        let mut g = [0.0; 3];
        let mut ss = 0.0;
        for (p, sv) in od.iter().zip(s) {
            for i in 0..3 {
                g[i] += (p[i] - cols[other][i] * sv[other]) * sv[k];
            }
            ss += sv[k] * sv[k];
        }
        if ss == 0.0 {
            continue;
        }
        let pos = g.map(|x| x.max(0.0));
        let n = norm(pos);
        if n > 0.0 {
            cols[k] = pos.map(|x| x / n);
        }
    }
}

/// Factorizes tissue OD tuples starting from `init`.
pub fn factorize(od: &[[f64; 3]], init: StainMatrix, p: &SnmfParams) -> Result<SnmfFit> {
    p.validate()?;
    if od.len() < 2 {
        return Err(Error::NoTissue);
    }
    let lambda = p.sparsity_lambda;
    let mut cols = init.columns();
    let mut s = vec![[0.0; 2]; od.len()];
    update_densities(&cols, od, &mut s, lambda);
    let mut current = objective(&cols, od, &s, lambda);
    let mut trace = vec![current];
    let mut rel_change = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < p.max_iters {
        iterations += 1;
        let mut candidate = cols;
        update_stains(&mut candidate, od, &s);
        if objective(&candidate, od, &s, lambda) <= current {
            cols = candidate;
        }
        update_densities(&cols, od, &mut s, lambda);
        let next = objective(&cols, od, &s, lambda);
        debug_assert!(next <= current, "objective rose from {current} to {next}");
        debug_assert!(cols.iter().all(|c| c.iter().all(|x| *x >= 0.0) && (norm(*c) - 1.0).abs() < 1e-9));
        rel_change = (current - next) / current.max(f64::MIN_POSITIVE);
        current = next;
        trace.push(current);
        if rel_change < p.tol {
            converged = true;
            break;
        }
    }
    if !converged && rel_change > 100.0 * p.tol {
        return Err(Error::NonConvergence { iters: iterations, rel_change });
    }
    let stains = StainMatrix::hematoxylin_first(cols[0], cols[1])?;
    Ok(SnmfFit {
        stains,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// Tissue OD tuples of `img`, subsampled to [`MAX_SAMPLES`] with `seed`.
pub fn sample_tissue(img: &RgbImage, threshold: f64, seed: u64) -> Vec<[f64; 3]> {
    let tissue = tissue_pixels(&rgb_to_od(img, &OdConfig::default()), threshold);
    if tissue.len() <= MAX_SAMPLES {
        return tissue;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, tissue.len(), MAX_SAMPLES).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| tissue[i]).collect()
}

/// Macenko warm start, or a seeded random start when the Macenko plane is degenerate.
fn initial_stains(tissue: &[[f64; 3]], p: &SnmfParams) -> Result<StainMatrix> {
    let macenko = MacenkoParams {
        od_threshold: p.od_threshold,
        ..MacenkoParams::default()
    };
    match stains_from_tissue(tissue, &macenko) {
        Ok(v) => Ok(v),
        Err(Error::DegenerateStains) => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed);
            let mut random = || [0; 3].map(|_| rng.gen_range(0.05..1.0));
            StainMatrix::hematoxylin_first(random(), random())
        }
        Err(e) => Err(e),
    }
}

pub fn fit_snmf(img: &RgbImage, p: &SnmfParams) -> Result<SnmfFit> {
    p.validate()?;
    let tissue = sample_tissue(img, p.od_threshold, p.seed);
    if tissue.len() < 2 {
        return Err(Error::NoTissue);
    }
    let init = initial_stains(&tissue, p)?;
    factorize(&tissue, init, p)
}

pub fn estimate_stains_snmf(img: &RgbImage, p: &SnmfParams) -> Result<StainMatrix> {
    Ok(fit_snmf(img, p)?.stains)
}

/// Density percentile matched between source and target.
pub const CONCENTRATION_PERCENTILE: f64 = 99.0;

#[derive(Debug, Clone, Copy)]
pub struct VahadaneNormalizer {
    pub params: SnmfParams,
    pub target: StainProfile,
}

impl VahadaneNormalizer {
    pub fn fit(target: &RgbImage, params: SnmfParams) -> Result<Self> {
        let labeled = |e| Error::Estimation {
            role: ImageRole::Target,
            source: Box::new(e),
        };
        let stains = estimate_stains_snmf(target, &params).map_err(labeled)?;
        let target = StainProfile::measure(target, stains, &OdConfig::default(), CONCENTRATION_PERCENTILE)
            .map_err(labeled)?;
        Ok(Self { params, target })
    }

    pub fn normalize(&self, source: &RgbImage) -> Result<RgbImage> {
        let stains = estimate_stains_snmf(source, &self.params).map_err(|e| Error::Estimation {
            role: ImageRole::Source,
            source: Box::new(e),
        })?;
        transfer_stains(source, &stains, &self.target, &OdConfig::default(), CONCENTRATION_PERCENTILE)
    }
}

pub fn normalize_vahadane(source: &RgbImage, target: &RgbImage, p: &SnmfParams) -> Result<RgbImage> {
    VahadaneNormalizer::fit(target, *p)?.normalize(source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optical_density::angle_between;
    use crate::synthetic::{reference_stains, tissue_image};

    #[test]
    fn recovers_reference_stains_monotonically() {
        let truth = reference_stains();
        let (img, _) = tissue_image(96, 96, &truth, 11).unwrap();
        let fit = fit_snmf(&img, &SnmfParams::default()).unwrap();
        for k in 0..2 {
            let err = angle_between(fit.stains.columns()[k], truth.columns()[k]);
            assert!(err < 0.03, "column {k} off by {err}");
        }
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn white_image_has_no_tissue() {
        let img = RgbImage::filled(16, 16, [255, 255, 255]).unwrap();
        assert!(matches!(
            estimate_stains_snmf(&img, &SnmfParams::default()),
            Err(Error::NoTissue)
        ));
    }

    #[test]
    fn seeded_runs_are_bitwise_equal() {
        let (img, _) = tissue_image(64, 64, &reference_stains(), 5).unwrap();
        let p = SnmfParams {
            seed: 42,
            ..Default::default()
        };
        let a = estimate_stains_snmf(&img, &p).unwrap();
        let b = estimate_stains_snmf(&img, &p).unwrap();
        assert_eq!(a.columns(), b.columns());
    }

    #[test]
    fn non_convergence_reported() {
        let (img, _) = tissue_image(64, 64, &reference_stains(), 6).unwrap();
        let tissue = sample_tissue(&img, 0.15, 0);
        let far = StainMatrix::new([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]).unwrap();
        let p = SnmfParams {
            max_iters: 1,
            ..Default::default()
        };
        assert!(matches!(
            factorize(&tissue, far, &p),
            Err(Error::NonConvergence { iters: 1, .. })
        ));
    }

    #[test]
    fn params_validated() {
        let bad = SnmfParams {
            sparsity_lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SnmfParams {
            max_iters: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
