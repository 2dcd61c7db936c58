//! Macenko stain estimation: SVD plane of the tissue OD cloud, robust angular
//! extremes inside that plane.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, ImageRole, Result};
use crate::imaging::RgbImage;
use crate::optical_density::{dot, rgb_to_od, transfer_stains, OdConfig, OdImage, StainMatrix, StainProfile};
use crate::stats::percentile_sorted;

/// Ratio of second to first singular value below which the OD cloud counts as rank 1.
const MIN_SINGULAR_RATIO: f64 = 0.02;
/// Minimum angle between the recovered stain vectors, in radians.
const MIN_STAIN_SEPARATION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacenkoParams {
    /// Pixels whose OD vector norm is at or below this are background.
    pub od_threshold: f64,
    /// Low/high percentiles of the in-plane angle distribution.
    pub angle_percentiles: (f64, f64),
    /// Percentile used as each stain's robust maximum density.
    pub concentration_percentile: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            angle_percentiles: (1.0, 99.0),
            concentration_percentile: 99.0,
        }
    }
}

impl MacenkoParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.angle_percentiles;
        if !(0.0 < lo && lo < hi && hi < 100.0) {
            return Err(Error::InvalidParams(format!(
                "angle percentiles must satisfy 0 < low < high < 100 (got {lo}, {hi})"
            )));
        }
        if !(self.od_threshold > 0.0) {
            return Err(Error::InvalidParams("od_threshold must be > 0".into()));
        }
        if !(0.0..=100.0).contains(&self.concentration_percentile) {
            return Err(Error::InvalidParams("concentration_percentile must be in [0, 100]".into()));
        }
        Ok(())
    }
}

/// OD tuples whose norm exceeds `threshold`.
pub(crate) fn tissue_pixels(od: &OdImage, threshold: f64) -> Vec<[f64; 3]> {
    od.pixels().filter(|p| dot(*p, *p) > threshold * threshold).collect()
}

pub fn estimate_stains_macenko(img: &RgbImage, p: &MacenkoParams) -> Result<StainMatrix> {
    p.validate()?;
    let od = rgb_to_od(img, &OdConfig::default());
    stains_from_tissue(&tissue_pixels(&od, p.od_threshold), p)
}

pub(crate) fn stains_from_tissue(tissue: &[[f64; 3]], p: &MacenkoParams) -> Result<StainMatrix> {
    if tissue.len() < 2 {
        return Err(Error::NoTissue);
    }
    // Right singular vectors of the N x 3 tuple matrix are the singular
    // vectors of its 3 x 3 scatter matrix.
    let mut scatter = Matrix3::<f64>::zeros();
    for px in tissue {
        let v = Vector3::from(*px);
        scatter += v * v.transpose();
    }
    let svd = scatter.svd(true, false);
    let u = svd.u.expect("requested");
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let (s1, s2) = (svd.singular_values[order[0]], svd.singular_values[order[1]]);
    // scatter eigenvalues are squared singular values of the tuple matrix
    if s1 <= 0.0 || (s2 / s1).sqrt() < MIN_SINGULAR_RATIO {
        return Err(Error::DegenerateStains);
    }
    let signed = |k: usize| {
        let c = u.column(order[k]);
        let v = [c[0], c[1], c[2]];
        if v.iter().sum::<f64>() < 0.0 {
            v.map(|x| -x)
        } else {
            v
        }
    };
    let (e1, e2) = (signed(0), signed(1));

    let mut angles: Vec<f64> = tissue.iter().map(|px| dot(*px, e2).atan2(dot(*px, e1))).collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&angles, p.angle_percentiles.0);
    let hi = percentile_sorted(&angles, p.angle_percentiles.1);
    let direction = |phi: f64| {
        let (s, c) = phi.sin_cos();
        [0, 1, 2].map(|i| (c * e1[i] + s * e2[i]).max(0.0))
    };
    let (a, b) = (direction(lo), direction(hi));
    if dot(a, a) == 0.0 || dot(b, b) == 0.0 {
        return Err(Error::DegenerateStains);
    }
    let stains = StainMatrix::hematoxylin_first(a, b)?;
    if stains.column_angle() < MIN_STAIN_SEPARATION {
        return Err(Error::DegenerateStains);
    }
    Ok(stains)
}

/// Target-side statistics for Macenko normalization, reusable across many sources.
#[derive(Debug, Clone, Copy)]
pub struct MacenkoNormalizer {
    pub params: MacenkoParams,
    pub target: StainProfile,
}

impl MacenkoNormalizer {
    pub fn fit(target: &RgbImage, params: MacenkoParams) -> Result<Self> {
        let labeled = |e| Error::Estimation {
            role: ImageRole::Target,
            source: Box::new(e),
        };
        let stains = estimate_stains_macenko(target, &params).map_err(labeled)?;
        let target = StainProfile::measure(target, stains, &OdConfig::default(), params.concentration_percentile)
            .map_err(labeled)?;
        Ok(Self { params, target })
    }

    pub fn normalize(&self, source: &RgbImage) -> Result<RgbImage> {
        let stains = estimate_stains_macenko(source, &self.params).map_err(|e| Error::Estimation {
            role: ImageRole::Source,
            source: Box::new(e),
        })?;
        transfer_stains(
            source,
            &stains,
            &self.target,
            &OdConfig::default(),
            self.params.concentration_percentile,
        )
    }
}

pub fn normalize_macenko(source: &RgbImage, target: &RgbImage, p: &MacenkoParams) -> Result<RgbImage> {
    MacenkoNormalizer::fit(target, *p)?.normalize(source)
}
