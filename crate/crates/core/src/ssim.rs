//! Windowed structural similarity on grayscale images, its dissimilarity
//! form, and dataset-level aggregation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{to_grayscale, GrayImage, RgbImage};
use crate::stats::{mean, pairwise_sum, population_std};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowWeights {
    Uniform,
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    /// Odd side length of the square window.
    pub window: usize,
    pub weights: WindowWeights,
    pub stride: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            weights: WindowWeights::Gaussian { sigma: 1.5 },
            stride: 1,
            c1: (0.01f64 * 1.0).powi(2),
            c2: (0.03f64 * 1.0).powi(2),
        }
    }
}

impl SsimParams {
    pub fn uniform(window: usize) -> Self {
        Self {
            window,
            weights: WindowWeights::Uniform,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidParams(format!("window must be odd and >= 3 (got {})", self.window)));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParams("stride must be >= 1".into()));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidParams("c1 and c2 must be > 0".into()));
        }
        if let WindowWeights::Gaussian { sigma } = self.weights {
            if !(sigma > 0.0) {
                return Err(Error::InvalidParams("gaussian sigma must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Normalized 1-D profile; the 2-D window is its outer product.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let n = self.window;
        let raw: Vec<f64> = match self.weights {
            WindowWeights::Uniform => vec![1.0; n],
            WindowWeights::Gaussian { sigma } => {
                let r = (n / 2) as f64;
                (0..n)
                    .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect()
            }
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// Weighted first and second moments of one window pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub mu_a: f64,
    pub mu_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    /// Covariance `σ_ab`.
    pub cov_ab: f64,
}

impl WindowStats {
    pub fn sigma_a(&self) -> f64 {
        self.var_a.max(0.0).sqrt()
    }

    pub fn sigma_b(&self) -> f64 {
        self.var_b.max(0.0).sqrt()
    }

    pub fn ssim(&self, c1: f64, c2: f64) -> f64 {
        let num = (2.0 * self.mu_a * self.mu_b + c1) * (2.0 * self.cov_ab + c2);
        let den = (self.mu_a * self.mu_a + self.mu_b * self.mu_b + c1) * (self.var_a + self.var_b + c2);
        num / den
    }
}

fn check_pair(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> Result<()> {
    p.validate()?;
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    let (w, h) = a.dims();
    if w < p.window || h < p.window {
        return Err(Error::ImageSmallerThanWindow {
            width: w,
            height: h,
            window: p.window,
        });
    }
    Ok(())
}

/// Statistics of every window position, row-major over window origins.
///
/// Moments come from two separable passes over the five products
/// `a, b, a², b², ab`; variances as `E[a²] − μ²`.
pub fn window_stats(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> Result<Vec<WindowStats>> {
    check_pair(a, b, p)?;
    let (w, h) = a.dims();
    let k = p.kernel_1d();
    let n = p.window;
    let xs: Vec<usize> = (0..=w - n).step_by(p.stride).collect();
    let ys: Vec<usize> = (0..=h - n).step_by(p.stride).collect();
    let (ad, bd) = (a.data(), b.data());

    // horizontal pass: rows x window columns x 5 moments
    let horiz: Vec<[f64; 5]> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let row = y * w;
            let k = &k;
            xs.iter().map(move |&x0| {
                let mut m = [0.0; 5];
                for (i, wt) in k.iter().enumerate() {
                    let (va, vb) = (ad[row + x0 + i], bd[row + x0 + i]);
                    m[0] += wt * va;
                    m[1] += wt * vb;
                    m[2] += wt * (va * va);
                    m[3] += wt * (vb * vb);
                    m[4] += wt * (va * vb);
                }
                m
            })
        })
        .collect();

    let nx = xs.len();
    let stats = ys
        .par_iter()
        .flat_map_iter(|&y0| {
            let horiz = &horiz;
            let k = &k;
            (0..nx).map(move |xi| {
                let mut m = [0.0; 5];
                for (j, wt) in k.iter().enumerate() {
                    let hm = horiz[(y0 + j) * nx + xi];
                    for (acc, v) in m.iter_mut().zip(hm) {
                        *acc += wt * v;
                    }
                }
                WindowStats {
                    mu_a: m[0],
                    mu_b: m[1],
                    var_a: m[2] - m[0] * m[0],
                    var_b: m[3] - m[1] * m[1],
                    cov_ab: m[4] - m[0] * m[1],
                }
            })
        })
        .collect();
    Ok(stats)
}

/// Per-window SSIM values, row-major over window origins.
pub fn ssim_map(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> Result<Vec<f64>> {
    Ok(window_stats(a, b, p)?
        .iter()
        .map(|s| s.ssim(p.c1, p.c2))
        .collect())
}

/// Mean SSIM over all window positions.
pub fn ssim(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> Result<f64> {
    let map = ssim_map(a, b, p)?;
    Ok(pairwise_sum(&map) / map.len() as f64)
}

/// SSIM of the luma channels of two color images.
pub fn ssim_rgb(a: &RgbImage, b: &RgbImage, p: &SsimParams) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    ssim(&to_grayscale(a), &to_grayscale(b), p)
}

/// Structural dissimilarity `(1 − SSIM) / 2`.
pub fn dssim(a: &RgbImage, b: &RgbImage, p: &SsimParams) -> Result<f64> {
    Ok(dssim_from_ssim(ssim_rgb(a, b, p)?))
}

pub fn dssim_from_ssim(s: f64) -> f64 {
    (1.0 - s) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "method,direction,mean,std,n";

    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            mean: mean(values),
            std: population_std(values),
            n: values.len(),
        })
    }

    pub fn csv_row(&self, method: &str, direction: &str) -> String {
        format!("{method},{direction},{:.6},{:.6},{}", self.mean, self.std, self.n)
    }
}

/// Mean and population std of `ssim_rgb` over image pairs.
pub fn evaluate_dataset<'a, I>(pairs: I, p: &SsimParams) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a RgbImage, &'a RgbImage)>,
{
    let values = pairs
        .into_iter()
        .map(|(a, b)| ssim_rgb(a, b, p))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_values(&values)
}
