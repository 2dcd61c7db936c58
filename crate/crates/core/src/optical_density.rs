//! Beer-Lambert optical density and two-stain color deconvolution, `od = V·s`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdConfig {
    /// Incident illumination intensity.
    pub i0: f64,
    /// Intensity floor applied before the logarithm.
    pub epsilon: f64,
}

impl Default for OdConfig {
    fn default() -> Self {
        Self {
            i0: 255.0,
            epsilon: 1.0,
        }
    }
}

impl OdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > 0.0 && self.epsilon > 0.0 && self.epsilon <= self.i0) {
            return Err(Error::InvalidParams(format!(
                "od config needs i0 > 0 and 0 < epsilon <= i0 (got i0={}, epsilon={})",
                self.i0, self.epsilon
            )));
        }
        Ok(())
    }

    pub fn intensity_to_od(&self, intensity: f64) -> f64 {
        let i = intensity.clamp(self.epsilon, self.i0);
        (self.i0 / i).log10()
    }

    pub fn od_to_intensity(&self, od: f64) -> u8 {
        let i = self.i0 * 10f64.powf(-od);
        i.round().clamp(0.0, self.i0.min(255.0)) as u8
    }
}

/// Per-channel optical density, row-major triples.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl OdImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "od buffer of {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParams("od values must be finite and >= 0".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two unit, non-negative stain absorption vectors: hematoxylin then eosin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    columns: [[f64; 3]; 2],
}

impl StainMatrix {
    /// Normalizes both columns; rejects negative or all-zero vectors.
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3]) -> Result<Self> {
        let unit = |v: [f64; 3]| -> Result<[f64; 3]> {
            if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(Error::InvalidParams(format!("stain vector {v:?} has negative entries")));
            }
            let n = norm(v);
            if n == 0.0 {
                return Err(Error::InvalidParams("zero stain vector".into()));
            }
            Ok([v[0] / n, v[1] / n, v[2] / n])
        };
        Ok(Self {
            columns: [unit(hematoxylin)?, unit(eosin)?],
        })
    }

    /// Like [`StainMatrix::new`] but orders the columns so the one with the
    /// larger blue-channel absorption comes first.
    pub fn hematoxylin_first(a: [f64; 3], b: [f64; 3]) -> Result<Self> {
        let m = Self::new(a, b)?;
        Ok(if m.columns[1][2] > m.columns[0][2] {
            m.swapped()
        } else {
            m
        })
    }

    pub fn columns(&self) -> [[f64; 3]; 2] {
        self.columns
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.columns[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.columns[1]
    }

    pub fn swapped(&self) -> Self {
        Self {
            columns: [self.columns[1], self.columns[0]],
        }
    }

    /// `Vᵀ V`.
    pub fn gram(&self) -> [[f64; 2]; 2] {
        let [h, e] = self.columns;
        let he = dot(h, e);
        [[dot(h, h), he], [he, dot(e, e)]]
    }

    pub fn is_full_rank(&self) -> bool {
        let g = self.gram();
        g[0][0] * g[1][1] - g[0][1] * g[1][0] > 1e-10
    }

    /// Angle in radians between the columns.
    pub fn column_angle(&self) -> f64 {
        angle_between(self.columns[0], self.columns[1])
    }

    pub fn apply(&self, s: [f64; 2]) -> [f64; 3] {
        let [h, e] = self.columns;
        [
            h[0] * s[0] + e[0] * s[1],
            h[1] * s[0] + e[1] * s[1],
            h[2] * s[0] + e[2] * s[1],
        ]
    }
}

/// Two stain densities per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ConcentrationMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if data.len() != width * height * 2 {
            return Err(Error::ShapeMismatch(format!(
                "concentration buffer of {} values for {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParams("concentrations must be finite and >= 0".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.data.chunks_exact(2).map(|c| [c[0], c[1]])
    }

    /// All densities of one stain (0 = hematoxylin, 1 = eosin).
    pub fn channel(&self, stain: usize) -> Vec<f64> {
        self.data.iter().skip(stain).step_by(2).copied().collect()
    }

    /// Multiplies each stain's densities by its factor.
    pub fn scaled(&self, factors: [f64; 2]) -> Self {
        let data = self
            .data
            .chunks_exact(2)
            .flat_map(|c| [c[0] * factors[0], c[1] * factors[1]])
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn swapped(&self) -> Self {
        let data = self.data.chunks_exact(2).flat_map(|c| [c[1], c[0]]).collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

pub fn rgb_to_od(img: &RgbImage, cfg: &OdConfig) -> OdImage {
    let lut: Vec<f64> = (0..=255u32).map(|i| cfg.intensity_to_od(i as f64)).collect();
    let data = img.data().iter().map(|&v| lut[v as usize]).collect();
    OdImage {
        width: img.width(),
        height: img.height(),
        data,
    }
}

pub fn od_to_rgb(od: &OdImage, cfg: &OdConfig) -> RgbImage {
    let data = od.data.iter().map(|&v| cfg.od_to_intensity(v)).collect();
    RgbImage::new(od.width, od.height, data).expect("dims carried over from a valid OdImage")
}

/// Minimizes `sᵀGs − 2bᵀs` over `s ≥ 0` for a positive-definite 2x2 `G`.
///
/// The optimum is either the unconstrained stationary point or lies on one of
/// the faces `s₀ = 0`, `s₁ = 0`; the feasible candidate with the lowest
/// objective wins.
pub(crate) fn solve_nonneg_pair(g: [[f64; 2]; 2], b: [f64; 2]) -> [f64; 2] {
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    let s0 = (g[1][1] * b[0] - g[0][1] * b[1]) / det;
    let s1 = (g[0][0] * b[1] - g[1][0] * b[0]) / det;
    if s0 >= 0.0 && s1 >= 0.0 {
        return [s0, s1];
    }
    let objective = |s: [f64; 2]| {
        g[0][0] * s[0] * s[0] + 2.0 * g[0][1] * s[0] * s[1] + g[1][1] * s[1] * s[1]
            - 2.0 * (b[0] * s[0] + b[1] * s[1])
    };
    let mut best = [0.0, 0.0];
    let mut best_val = 0.0;
    for cand in [[(b[0] / g[0][0]).max(0.0), 0.0], [0.0, (b[1] / g[1][1]).max(0.0)]] {
        let v = objective(cand);
        if v < best_val {
            best = cand;
            best_val = v;
        }
    }
    best
}

/// Per-pixel non-negative least squares of `od` onto the columns of `v`.
pub fn decompose(od: &OdImage, v: &StainMatrix) -> Result<ConcentrationMap> {
    if !v.is_full_rank() {
        return Err(Error::RankDeficient);
    }
    let g = v.gram();
    let [h, e] = v.columns();
    let data: Vec<f64> = od
        .data
        .par_chunks_exact(3)
        .flat_map_iter(|px| {
            let p = [px[0], px[1], px[2]];
            solve_nonneg_pair(g, [dot(h, p), dot(e, p)])
        })
        .collect();
    Ok(ConcentrationMap {
        width: od.width,
        height: od.height,
        data,
    })
}

/// `V·s` per pixel, staying in optical density space.
pub fn reconstruct_od(s: &ConcentrationMap, v: &StainMatrix) -> OdImage {
    let data = s
        .data
        .chunks_exact(2)
        .flat_map(|c| v.apply([c[0], c[1]]))
        .collect();
    OdImage {
        width: s.width,
        height: s.height,
        data,
    }
}

pub fn reconstruct(s: &ConcentrationMap, v: &StainMatrix, cfg: &OdConfig) -> RgbImage {
    od_to_rgb(&reconstruct_od(s, v), cfg)
}

/// Orthogonal projection onto the non-negative cone of `v`, in OD space.
pub fn project(od: &OdImage, v: &StainMatrix) -> Result<OdImage> {
    Ok(reconstruct_od(&decompose(od, v)?, v))
}

/// Stain vectors plus a robust per-stain density maximum, the two statistics
/// a target image contributes to stain transfer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainProfile {
    pub stains: StainMatrix,
    pub max_concentrations: [f64; 2],
}

impl StainProfile {
    /// Decomposes `img` with `stains` and records the `percentile`-th density of each stain.
    pub fn measure(img: &RgbImage, stains: StainMatrix, cfg: &OdConfig, percentile: f64) -> Result<Self> {
        let s = decompose(&rgb_to_od(img, cfg), &stains)?;
        let max_concentrations = [
            crate::stats::percentile(&s.channel(0), percentile),
            crate::stats::percentile(&s.channel(1), percentile),
        ];
        Ok(Self {
            stains,
            max_concentrations,
        })
    }
}

/// Re-renders `source` with the target's stain vectors after matching each
/// stain's robust maximum density to the target's.
pub fn transfer_stains(
    source: &RgbImage,
    source_stains: &StainMatrix,
    target: &StainProfile,
    cfg: &OdConfig,
    percentile: f64,
) -> Result<RgbImage> {
    let s = decompose(&rgb_to_od(source, cfg), source_stains)?;
    let mut factors = [1.0; 2];
    for (k, f) in factors.iter_mut().enumerate() {
        let src_max = crate::stats::percentile(&s.channel(k), percentile);
        if src_max > 0.0 {
            *f = target.max_concentrations[k] / src_max;
        }
    }
    Ok(reconstruct(&s.scaled(factors), &target.stains, cfg))
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let c = dot(a, b) / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn he() -> StainMatrix {
        StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).unwrap()
    }

    #[test]
    fn od_values() {
        let cfg = OdConfig::default();
        assert_eq!(cfg.intensity_to_od(255.0), 0.0);
        assert!((cfg.intensity_to_od(0.0) - 2.406_540_180_433_955).abs() < 1e-12);
        assert!((cfg.intensity_to_od(26.0) - 0.991_566_832_463_137).abs() < 1e-9);
        assert_eq!(cfg.od_to_intensity(0.0), 255);
        assert_eq!(cfg.od_to_intensity(1.0), 26);
    }

    #[test]
    fn od_round_trip_above_floor() {
        let cfg = OdConfig::default();
        for i in 1..=255u8 {
            assert_eq!(cfg.od_to_intensity(cfg.intensity_to_od(i as f64)), i);
        }
    }

    #[test]
    fn od_monotone_decreasing() {
        let cfg = OdConfig::default();
        let ods: Vec<f64> = (0..=255).map(|i| cfg.intensity_to_od(i as f64)).collect();
        // 0 and 1 share the clamp floor
        assert_eq!(ods[0], ods[1]);
        assert!(ods[1..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn config_validation() {
        assert!(OdConfig::default().validate().is_ok());
        assert!(OdConfig { i0: 255.0, epsilon: 0.0 }.validate().is_err());
        assert!(OdConfig { i0: 10.0, epsilon: 11.0 }.validate().is_err());
    }

    #[test]
    fn decompose_recovers_known_factors() {
        let v = he();
        let truth = [[0.4, 1.2], [0.0, 0.8], [1.5, 0.0], [0.3, 0.3]];
        let data: Vec<f64> = truth.iter().flat_map(|&s| v.apply(s)).collect();
        let od = OdImage::new(4, 1, data).unwrap();
        let s = decompose(&od, &v).unwrap();
        for (got, want) in s.pixels().zip(truth) {
            assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn decompose_zero_and_orthogonal() {
        let v = StainMatrix::new([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).unwrap();
        let od = OdImage::new(2, 1, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.7]).unwrap();
        let s = decompose(&od, &v).unwrap();
        assert_eq!(s.data(), &[0.0; 4]);
    }

    #[test]
    fn decompose_clamps_to_boundary() {
        // od outside the cone on the eosin side of hematoxylin
        let v = StainMatrix::new([1.0, 0.2, 0.0], [1.0, 0.0, 0.2]).unwrap();
        let od = OdImage::new(1, 1, vec![0.5, 0.5, 0.0]).unwrap();
        let s = decompose(&od, &v).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert!(s.data()[0] > 0.0);
    }

    #[test]
    fn rank_deficient_rejected() {
        let v = StainMatrix::new([0.6, 0.7, 0.3], [1.2, 1.4, 0.6]).unwrap();
        let od = OdImage::new(1, 1, vec![0.1, 0.1, 0.1]).unwrap();
        assert!(matches!(decompose(&od, &v), Err(Error::RankDeficient)));
    }

    #[test]
    fn zero_concentration_is_white() {
        let s = ConcentrationMap::new(3, 3, vec![0.0; 18]).unwrap();
        let img = reconstruct(&s, &he(), &OdConfig::default());
        assert!(img.pixels().all(|p| p == [255, 255, 255]));
    }

    #[test]
    fn column_swap_symmetry() {
        let cfg = OdConfig::default();
        let s = ConcentrationMap::new(2, 2, vec![0.1, 0.9, 1.3, 0.0, 0.5, 0.5, 2.0, 0.2]).unwrap();
        let a = reconstruct(&s, &he(), &cfg);
        let b = reconstruct(&s.swapped(), &he().swapped(), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn hematoxylin_first_orders_by_blue() {
        let m = StainMatrix::hematoxylin_first([0.07, 0.99, 0.11], [0.65, 0.70, 0.29]).unwrap();
        assert!(m.hematoxylin()[2] > m.eosin()[2]);
        assert!(StainMatrix::new([-0.1, 1.0, 0.0], [0.0, 1.0, 0.0]).is_err());
    }
}
