//! Patch extraction, per-patch normalization and stitching for images too
//! large to normalize in one piece.

use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, PatchFailure, Result};
use crate::imaging::{read_image, resize, to_grayscale, write_atomic, write_image, RgbImage};
use crate::macenko::MacenkoNormalizer;
use crate::nn::{Generator, GeneratorWeights};
use crate::stats::mean;
use crate::vahadane::VahadaneNormalizer;

pub const DEFAULT_PATCH_SIZE: usize = 500;
pub const WHITE: [u8; 3] = [255, 255, 255];

/// How overlapping patches are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Blend {
    /// Later patches in row-major order win.
    #[default]
    Overwrite,
    /// Weighted by distance to the patch edge.
    Feather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    /// `(width, height)` of the source image.
    pub source_dims: (usize, usize),
    pub patch_size: usize,
    pub stride: usize,
    pub pad_color: [u8; 3],
    pub blend: Blend,
}

impl PatchGrid {
    /// Non-overlapping 500-pixel grid with white padding.
    pub fn new(source_dims: (usize, usize)) -> Self {
        Self {
            source_dims,
            patch_size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_PATCH_SIZE,
            pad_color: WHITE,
            blend: Blend::Overwrite,
        }
    }

    pub fn with_size(source_dims: (usize, usize), patch_size: usize, stride: usize) -> Result<Self> {
        let g = Self {
            patch_size,
            stride,
            ..Self::new(source_dims)
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.source_dims;
        if w == 0 || h == 0 {
            return Err(Error::ZeroDimension { width: w, height: h });
        }
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidParams(format!(
                "need 0 < stride <= patch_size (got stride {}, size {})",
                self.stride, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.source_dims.1.div_ceil(self.stride)
    }

    pub fn cols(&self) -> usize {
        self.source_dims.0.div_ceil(self.stride)
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel origin `(x, y)` of grid cell `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (col * self.stride, row * self.stride)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub row: usize,
    pub col: usize,
    pub x: usize,
    pub y: usize,
    pub image: RgbImage,
}

/// Cuts `img` into `rows × cols` patches in row-major order; cells running
/// past the right or bottom edge are filled with the pad color.
pub fn extract_patches(img: &RgbImage, g: &PatchGrid) -> Result<Vec<PatchRecord>> {
    g.validate()?;
    if img.dims() != g.source_dims {
        return Err(Error::DimensionMismatch {
            left: img.dims(),
            right: g.source_dims,
        });
    }
    let cells: Vec<(usize, usize)> = (0..g.rows()).flat_map(|r| (0..g.cols()).map(move |c| (r, c))).collect();
    cells
        .into_par_iter()
        .map(|(row, col)| {
            let (x, y) = g.origin(row, col);
            Ok(PatchRecord {
                row,
                col,
                x,
                y,
                image: img.crop_padded(x, y, g.patch_size, g.patch_size, g.pad_color)?,
            })
        })
        .collect()
}

fn feather_weight(i: usize, size: usize) -> f64 {
    (i + 1).min(size - i) as f64
}

/// Reassembles patches at the grid's source dimensions, cropping padding.
/// Input order does not matter.
pub fn stitch(patches: &[PatchRecord], g: &PatchGrid) -> Result<RgbImage> {
    g.validate()?;
    let (rows, cols) = (g.rows(), g.cols());
    let mut slots: Vec<Option<&PatchRecord>> = vec![None; rows * cols];
    for p in patches {
        if p.row >= rows || p.col >= cols {
            return Err(Error::InvalidParams(format!(
                "patch (row {}, col {}) outside the {rows}x{cols} grid",
                p.row, p.col
            )));
        }
        if p.image.dims() != (g.patch_size, g.patch_size) {
            return Err(Error::DimensionMismatch {
                left: p.image.dims(),
                right: (g.patch_size, g.patch_size),
            });
        }
        let slot = &mut slots[p.row * cols + p.col];
        if slot.is_some() {
            return Err(Error::DuplicatePatch { row: p.row, col: p.col });
        }
        *slot = Some(p);
    }
    if let Some(i) = slots.iter().position(Option::is_none) {
        return Err(Error::MissingPatch {
            row: i / cols,
            col: i % cols,
        });
    }
    let (w, h) = g.source_dims;
    let size = g.patch_size;
    match g.blend {
        Blend::Overwrite => {
            let mut out = vec![0u8; w * h * 3];
            for p in slots.iter().flatten() {
                let (x0, y0) = g.origin(p.row, p.col);
                let src = p.image.data();
                for dy in 0..size.min(h - y0) {
                    let n = size.min(w - x0) * 3;
                    let dst = ((y0 + dy) * w + x0) * 3;
                    out[dst..dst + n].copy_from_slice(&src[dy * size * 3..dy * size * 3 + n]);
                }
            }
            RgbImage::new(w, h, out)
        }
        Blend::Feather => {
            let mut acc = vec![0.0f64; w * h * 3];
            let mut wsum = vec![0.0f64; w * h];
            for p in slots.iter().flatten() {
                let (x0, y0) = g.origin(p.row, p.col);
                for dy in 0..size.min(h - y0) {
                    for dx in 0..size.min(w - x0) {
                        let wt = feather_weight(dx, size) * feather_weight(dy, size);
                        let px = p.image.pixel(dx, dy);
                        let i = (y0 + dy) * w + x0 + dx;
                        for c in 0..3 {
                            acc[i * 3 + c] += wt * px[c] as f64;
                        }
                        wsum[i] += wt;
                    }
                }
            }
            let data = acc
                .iter()
                .enumerate()
                .map(|(i, v)| (v / wsum[i / 3]).round().clamp(0.0, 255.0) as u8)
                .collect();
            RgbImage::new(w, h, data)
        }
    }
}

/// Anything that maps one patch to a normalized patch of the same size.
pub trait PatchNormalizer: Sync {
    fn normalize_patch(&self, patch: &RgbImage) -> Result<RgbImage>;
}

impl PatchNormalizer for MacenkoNormalizer {
    fn normalize_patch(&self, patch: &RgbImage) -> Result<RgbImage> {
        self.normalize(patch)
    }
}

impl PatchNormalizer for VahadaneNormalizer {
    fn normalize_patch(&self, patch: &RgbImage) -> Result<RgbImage> {
        self.normalize(patch)
    }
}

pub const SAASN_WORK_SIZE: usize = 256;

/// Generator-based normalizer; patches are resized to the network's working
/// size and back.
#[derive(Debug, Clone)]
pub struct SaasnNormalizer {
    generator: Generator,
    work_size: usize,
}

impl SaasnNormalizer {
    pub fn new(weights: &GeneratorWeights) -> Result<Self> {
        Self::with_work_size(weights, SAASN_WORK_SIZE)
    }

    pub fn with_work_size(weights: &GeneratorWeights, work_size: usize) -> Result<Self> {
        let m = weights.arch().size_multiple();
        if work_size == 0 || !work_size.is_multiple_of(m) {
            return Err(Error::InvalidParams(format!("work size {work_size} must be a multiple of {m}")));
        }
        Ok(Self {
            generator: Generator::new(weights)?,
            work_size,
        })
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }
}

impl PatchNormalizer for SaasnNormalizer {
    fn normalize_patch(&self, patch: &RgbImage) -> Result<RgbImage> {
        let (w, h) = patch.dims();
        let small = resize(patch, self.work_size, self.work_size)?;
        let out = self.generator.forward_image(&small)?;
        resize(&out, w, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FailurePolicy {
    /// Any failed patch fails the slide.
    FailFast,
    /// Failed patches are kept unnormalized and reported.
    #[default]
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchStatus {
    Ok,
    PassThrough,
}

impl fmt::Display for PatchStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchStatus::Ok => "ok",
            PatchStatus::PassThrough => "passthrough",
        })
    }
}

impl std::str::FromStr for PatchStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(PatchStatus::Ok),
            "passthrough" => Ok(PatchStatus::PassThrough),
            other => Err(Error::InvalidParams(format!("unknown patch status `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WsiOutput {
    pub image: RgbImage,
    pub patches: Vec<PatchRecord>,
    pub statuses: Vec<PatchStatus>,
    /// Patches kept unnormalized under [`FailurePolicy::PassThrough`].
    pub failures: Vec<PatchFailure>,
}

/// Extract, normalize every patch concurrently, stitch. The result does not
/// depend on thread count or scheduling.
pub fn normalize_wsi(
    img: &RgbImage,
    g: &PatchGrid,
    normalizer: &dyn PatchNormalizer,
    policy: FailurePolicy,
) -> Result<WsiOutput> {
    let patches = extract_patches(img, g)?;
    let results: Vec<Result<RgbImage>> = patches.par_iter().map(|p| normalizer.normalize_patch(&p.image)).collect();
    let mut out = Vec::with_capacity(patches.len());
    let mut statuses = Vec::with_capacity(patches.len());
    let mut failures = Vec::new();
    for (p, r) in patches.into_iter().zip(results) {
        match r {
            Ok(image) if image.dims() == p.image.dims() => {
                out.push(PatchRecord { image, ..p });
                statuses.push(PatchStatus::Ok);
            }
            other => {
                let message = match other {
                    Err(e) => e.to_string(),
                    Ok(i) => format!("normalizer returned {:?} for a {:?} patch", i.dims(), p.image.dims()),
                };
                failures.push(PatchFailure {
                    row: p.row,
                    col: p.col,
                    message,
                });
                out.push(p);
                statuses.push(PatchStatus::PassThrough);
            }
        }
    }
    if policy == FailurePolicy::FailFast && !failures.is_empty() {
        return Err(Error::PatchFailures(failures));
    }
    Ok(WsiOutput {
        image: stitch(&out, g)?,
        patches: out,
        statuses,
        failures,
    })
}

/// Mean absolute gray-level step across patch boundaries minus the mean step
/// between interior neighbours. Near 0 for seamless images, positive when
/// patch edges are visible.
pub fn seam_score(img: &RgbImage, g: &PatchGrid) -> Result<f64> {
    g.validate()?;
    if img.dims() != g.source_dims {
        return Err(Error::DimensionMismatch {
            left: img.dims(),
            right: g.source_dims,
        });
    }
    let gray = to_grayscale(img);
    let (w, h) = img.dims();
    let mut boundary = Vec::new();
    let mut interior = Vec::new();
    for y in 0..h {
        for x in 1..w {
            let d = (gray.get(x, y) - gray.get(x - 1, y)).abs();
            if x % g.stride == 0 { boundary.push(d) } else { interior.push(d) }
        }
    }
    for y in 1..h {
        for x in 0..w {
            let d = (gray.get(x, y) - gray.get(x, y - 1)).abs();
            if y % g.stride == 0 { boundary.push(d) } else { interior.push(d) }
        }
    }
    if boundary.is_empty() || interior.is_empty() {
        return Ok(0.0);
    }
    Ok(mean(&boundary) - mean(&interior))
}

pub const MANIFEST_HEADER: &str = "row,col,x,y,status";

pub fn patch_file_name(slide: &str, row: usize, col: usize) -> String {
    format!("{slide}_{row}_{col}.png")
}

pub fn manifest_file_name(slide: &str) -> String {
    format!("{slide}_manifest.csv")
}

/// Writes each patch as `{slide}_{row}_{col}.png` plus a manifest CSV.
pub fn spill_patches(patches: &[PatchRecord], statuses: &[PatchStatus], dir: &Path, slide: &str) -> Result<()> {
    if patches.len() != statuses.len() {
        return Err(Error::InvalidParams("one status per patch required".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    patches
        .par_iter()
        .try_for_each(|p| write_image(&p.image, dir.join(patch_file_name(slide, p.row, p.col))))?;
    let mut csv = String::from(MANIFEST_HEADER);
    csv.push('\n');
    for (p, s) in patches.iter().zip(statuses) {
        csv.push_str(&format!("{},{},{},{},{s}\n", p.row, p.col, p.x, p.y));
    }
    write_atomic(&dir.join(manifest_file_name(slide)), csv.as_bytes())
}

/// Reads back the patches listed in a slide's manifest.
pub fn load_patches(dir: &Path, slide: &str) -> Result<(Vec<PatchRecord>, Vec<PatchStatus>)> {
    let path = dir.join(manifest_file_name(slide));
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::Io {
            path: path.clone(),
            source: e,
        },
    })?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::InvalidParams(format!("{}: expected header `{MANIFEST_HEADER}`", path.display())));
    }
    let rows: Vec<(usize, usize, usize, usize, PatchStatus)> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.trim().split(',').collect();
            let bad = || Error::InvalidParams(format!("{}: malformed manifest row `{line}`", path.display()));
            if f.len() != 5 {
                return Err(bad());
            }
            let n = |s: &str| s.parse::<usize>().map_err(|_| bad());
            Ok((n(f[0])?, n(f[1])?, n(f[2])?, n(f[3])?, f[4].parse()?))
        })
        .collect::<Result<_>>()?;
    let patches = rows
        .par_iter()
        .map(|&(row, col, x, y, _)| {
            Ok(PatchRecord {
                row,
                col,
                x,
                y,
                image: read_image(dir.join(patch_file_name(slide, row, col)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((patches, rows.into_iter().map(|r| r.4).collect()))
}
