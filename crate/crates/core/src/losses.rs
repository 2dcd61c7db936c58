//! Forward evaluation of the adversarial, cycle, structural and identity
//! objective terms.
//!
//! Images are `[3, h, w]` tensors in the generator's `[−1, 1]` space. L1
//! terms are computed there; SSIM terms on the luma of `(v + 1) / 2`. Every
//! expectation is a batch mean.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imaging::{luma, GrayImage};
use crate::ssim::{dssim_from_ssim, ssim, SsimParams};
use crate::stats::{mean, pairwise_sum};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Cycle consistency.
    pub alpha: f64,
    /// Structural cycle.
    pub beta: f64,
    /// Mapped-image dissimilarity.
    pub gamma: f64,
    /// Identity.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 10.0,
            gamma: 10.0,
            delta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParams(format!("loss weight {name} must be finite and >= 0 (got {v})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdvMode {
    /// Log-likelihood on probabilities in (0, 1).
    #[default]
    CrossEntropy,
    /// Squared error on raw logits.
    LeastSquares,
}

impl FromStr for AdvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(AdvMode::CrossEntropy),
            "ls" => Ok(AdvMode::LeastSquares),
            other => Err(Error::InvalidParams(format!("adversarial mode must be ce or ls (got {other})"))),
        }
    }
}

impl fmt::Display for AdvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdvMode::CrossEntropy => "ce",
            AdvMode::LeastSquares => "ls",
        })
    }
}

fn batch_mean(values: &[f64], what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::IncompleteBundle(format!("{what} is empty")));
    }
    Ok(mean(values))
}

fn check_probabilities(values: &[f64]) -> Result<()> {
    match values.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        Some(&p) => Err(Error::ProbabilityOutOfRange(p)),
        None => Ok(()),
    }
}

/// `E[log D(real)]` or `E[(D(real) − 1)²]`.
fn real_term(real: &[f64], mode: AdvMode) -> Result<f64> {
    match mode {
        AdvMode::CrossEntropy => {
            check_probabilities(real)?;
            batch_mean(&real.iter().map(|p| p.ln()).collect::<Vec<_>>(), "real outputs")
        }
        AdvMode::LeastSquares => batch_mean(&real.iter().map(|d| (d - 1.0).powi(2)).collect::<Vec<_>>(), "real outputs"),
    }
}

/// `E[log(1 − D(fake))]` or `E[D(fake)²]`.
fn fake_term(fake: &[f64], mode: AdvMode) -> Result<f64> {
    match mode {
        AdvMode::CrossEntropy => {
            check_probabilities(fake)?;
            batch_mean(&fake.iter().map(|p| (1.0 - p).ln()).collect::<Vec<_>>(), "fake outputs")
        }
        AdvMode::LeastSquares => batch_mean(&fake.iter().map(|d| d * d).collect::<Vec<_>>(), "fake outputs"),
    }
}

/// Adversarial term of the target-domain discriminator.
pub fn adv_loss_y(d_y_real: &[f64], d_y_fake: &[f64], mode: AdvMode) -> Result<f64> {
    Ok(real_term(d_y_real, mode)? + fake_term(d_y_fake, mode)?)
}

/// Boundary-control term: penalizes the source discriminator for accepting
/// real target images.
pub fn boundary_term(d_x_on_real_y: &[f64], mode: AdvMode) -> Result<f64> {
    fake_term(d_x_on_real_y, mode)
}

/// Adversarial term of the source-domain discriminator including the
/// boundary-control term.
pub fn adv_loss_x_with_boundary(d_x_real: &[f64], d_x_fake: &[f64], d_x_on_real_y: &[f64], mode: AdvMode) -> Result<f64> {
    Ok(real_term(d_x_real, mode)? + fake_term(d_x_fake, mode)? + boundary_term(d_x_on_real_y, mode)?)
}

/// Generator-side adversarial term: `E[log(1 − D(fake))]` or `E[(D(fake) − 1)²]`.
pub fn generator_adv_loss(d_fake: &[f64], mode: AdvMode) -> Result<f64> {
    match mode {
        AdvMode::CrossEntropy => fake_term(d_fake, mode),
        AdvMode::LeastSquares => real_term(d_fake, mode),
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    match a.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok(()),
        s => Err(Error::ShapeMismatch(format!("expected [3, h, w] image tensor, got {s:?}"))),
    }
}

fn check_batches(a: &[Tensor], b: &[Tensor], what: &str) -> Result<()> {
    if a.is_empty() {
        return Err(Error::IncompleteBundle(format!("{what} batch is empty")));
    }
    if a.len() != b.len() {
        return Err(Error::IncompleteBundle(format!("{what}: batch sizes {} and {}", a.len(), b.len())));
    }
    a.iter().zip(b).try_for_each(|(x, y)| check_pair(x, y))
}

/// Batch mean of per-image mean absolute differences.
pub fn l1_distance(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    check_batches(a, b, "l1")?;
    let per_image: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| mean(&x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>()))
        .collect();
    Ok(mean(&per_image))
}

/// Luma of `(v + 1) / 2` for a model-space image tensor.
pub fn model_luma(t: &Tensor) -> Result<GrayImage> {
    let (h, w) = match t.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::ShapeMismatch(format!("expected [3, h, w], got {s:?}"))),
    };
    let n = h * w;
    let d = t.data();
    let data = (0..n)
        .map(|i| {
            let px = [0, 1, 2].map(|c| ((d[c * n + i] + 1.0) / 2.0).clamp(0.0, 1.0));
            luma(px).clamp(0.0, 1.0)
        })
        .collect();
    GrayImage::new(w, h, data)
}

/// Batch mean of `(1 − SSIM) / 2` on luma.
pub fn dssim_distance(a: &[Tensor], b: &[Tensor], p: &SsimParams) -> Result<f64> {
    check_batches(a, b, "dssim")?;
    let per_image = a
        .iter()
        .zip(b)
        .map(|(x, y)| Ok(dssim_from_ssim(ssim(&model_luma(x)?, &model_luma(y)?, p)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean(&per_image))
}

pub fn cycle_loss(x: &[Tensor], cycled_x: &[Tensor], y: &[Tensor], cycled_y: &[Tensor]) -> Result<f64> {
    Ok(l1_distance(cycled_x, x)? + l1_distance(cycled_y, y)?)
}

pub fn structural_cycle_loss(
    x: &[Tensor],
    cycled_x: &[Tensor],
    y: &[Tensor],
    cycled_y: &[Tensor],
    p: &SsimParams,
) -> Result<f64> {
    Ok(dssim_distance(cycled_x, x, p)? + dssim_distance(cycled_y, y, p)?)
}

/// Dissimilarity between each image and its translation to the other domain.
pub fn dssim_mapped_loss(x: &[Tensor], fake_y: &[Tensor], y: &[Tensor], fake_x: &[Tensor], p: &SsimParams) -> Result<f64> {
    Ok(dssim_distance(fake_y, x, p)? + dssim_distance(fake_x, y, p)?)
}

pub fn identity_loss(y: &[Tensor], id_y: &[Tensor], x: &[Tensor], id_x: &[Tensor]) -> Result<f64> {
    Ok(l1_distance(id_y, y)? + l1_distance(id_x, x)?)
}

/// Discriminator outputs needed by the adversarial terms, one value per image
/// (a probability in cross-entropy mode, a logit mean in least-squares mode).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscriminatorOutputs {
    pub d_y_real: Vec<f64>,
    pub d_y_fake: Vec<f64>,
    pub d_x_real: Vec<f64>,
    pub d_x_fake: Vec<f64>,
    pub d_x_on_real_y: Vec<f64>,
}

/// One batch of source images `x`, target images `y` and their translations.
///
/// `fake_y` is the target-domain translation of `x`, `fake_x` the
/// source-domain translation of `y`; `id_x` and `id_y` are each image passed
/// through the generator that maps into its own domain.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchBundle {
    pub x: Vec<Tensor>,
    pub y: Vec<Tensor>,
    pub fake_y: Vec<Tensor>,
    pub fake_x: Vec<Tensor>,
    pub cycled_x: Vec<Tensor>,
    pub cycled_y: Vec<Tensor>,
    pub id_x: Vec<Tensor>,
    pub id_y: Vec<Tensor>,
    pub d: DiscriminatorOutputs,
}

impl BatchBundle {
    fn check_complete(&self) -> Result<()> {
        let fields: [(&str, usize); 8] = [
            ("x", self.x.len()),
            ("y", self.y.len()),
            ("fake_y", self.fake_y.len()),
            ("fake_x", self.fake_x.len()),
            ("cycled_x", self.cycled_x.len()),
            ("cycled_y", self.cycled_y.len()),
            ("id_x", self.id_x.len()),
            ("id_y", self.id_y.len()),
        ];
        let scalars: [(&str, usize); 5] = [
            ("d_y_real", self.d.d_y_real.len()),
            ("d_y_fake", self.d.d_y_fake.len()),
            ("d_x_real", self.d.d_x_real.len()),
            ("d_x_fake", self.d.d_x_fake.len()),
            ("d_x_on_real_y", self.d.d_x_on_real_y.len()),
        ];
        for (name, n) in fields.iter().chain(&scalars) {
            if *n == 0 {
                return Err(Error::IncompleteBundle(format!("`{name}` is missing")));
            }
        }
        let dims = self.x[0].shape();
        for (name, batch) in [
            ("x", &self.x),
            ("y", &self.y),
            ("fake_y", &self.fake_y),
            ("fake_x", &self.fake_x),
            ("cycled_x", &self.cycled_x),
            ("cycled_y", &self.cycled_y),
            ("id_x", &self.id_x),
            ("id_y", &self.id_y),
        ] {
            if let Some(t) = batch.iter().find(|t| t.shape() != dims) {
                return Err(Error::ShapeMismatch(format!("`{name}` has {:?}, expected {dims:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Weighted objective terms. `adv_x` already includes `boundary`, which is
/// reported separately for logging only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub adv_y: f64,
    pub adv_x: f64,
    pub boundary: f64,
    pub cyc: f64,
    pub scyc: f64,
    pub dssim: f64,
    pub id: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "adv_y,adv_x,boundary,cyc,scyc,dssim,id,total";

    /// Combines unweighted components; `total` is summed in a fixed order.
    #[allow(clippy::too_many_arguments)]
    pub fn from_components(
        adv_y: f64,
        adv_x: f64,
        boundary: f64,
        cyc: f64,
        scyc: f64,
        dssim: f64,
        id: f64,
        w: &LossWeights,
    ) -> Self {
        let total = pairwise_sum(&Self::weighted_terms_of(adv_y, adv_x, cyc, scyc, dssim, id, w));
        Self {
            adv_y,
            adv_x,
            boundary,
            cyc,
            scyc,
            dssim,
            id,
            total,
        }
    }

    fn weighted_terms_of(adv_y: f64, adv_x: f64, cyc: f64, scyc: f64, dssim: f64, id: f64, w: &LossWeights) -> [f64; 6] {
        [adv_y, adv_x, w.alpha * cyc, w.beta * scyc, w.gamma * dssim, w.delta * id]
    }

    /// The six addends of `total` in summation order.
    pub fn weighted_terms(&self, w: &LossWeights) -> [f64; 6] {
        Self::weighted_terms_of(self.adv_y, self.adv_x, self.cyc, self.scyc, self.dssim, self.id, w)
    }

    pub fn csv_row(&self) -> String {
        [self.adv_y, self.adv_x, self.boundary, self.cyc, self.scyc, self.dssim, self.id, self.total]
            .iter()
            .map(|v| format!("{v:.9}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn total_objective(bundle: &BatchBundle, w: &LossWeights, p: &SsimParams, mode: AdvMode) -> Result<LossBreakdown> {
    w.validate()?;
    p.validate()?;
    bundle.check_complete()?;
    let b = bundle;
    let d = &b.d;
    Ok(LossBreakdown::from_components(
        adv_loss_y(&d.d_y_real, &d.d_y_fake, mode)?,
        adv_loss_x_with_boundary(&d.d_x_real, &d.d_x_fake, &d.d_x_on_real_y, mode)?,
        boundary_term(&d.d_x_on_real_y, mode)?,
        cycle_loss(&b.x, &b.cycled_x, &b.y, &b.cycled_y)?,
        structural_cycle_loss(&b.x, &b.cycled_x, &b.y, &b.cycled_y, p)?,
        dssim_mapped_loss(&b.x, &b.fake_y, &b.y, &b.fake_x, p)?,
        identity_loss(&b.y, &b.id_y, &b.x, &b.id_x)?,
        w,
    ))
}
