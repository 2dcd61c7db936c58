//! Procedural two-stain tissue images with known stain vectors and densities.
//!
//! Useful for recovery tests, demos and benchmarks where the ground-truth
//! factorization must be known exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::RgbImage;
use crate::optical_density::{reconstruct, ConcentrationMap, OdConfig, StainMatrix};

/// Reference H&E absorption vectors, hematoxylin first.
pub const REFERENCE_HEMATOXYLIN: [f64; 3] = [0.65, 0.70, 0.29];
pub const REFERENCE_EOSIN: [f64; 3] = [0.07, 0.99, 0.11];

pub fn reference_stains() -> StainMatrix {
    StainMatrix::new(REFERENCE_HEMATOXYLIN, REFERENCE_EOSIN).expect("constant vectors are valid")
}

/// A random H&E-like stain matrix: each reference vector perturbed by up to
/// `jitter` per component, hematoxylin kept first and the columns at least
/// 0.4 rad apart.
pub fn random_stains(rng: &mut impl Rng, jitter: f64) -> StainMatrix {
    loop {
        let mut perturb = |v: [f64; 3]| v.map(|c| (c + rng.gen_range(-jitter..=jitter)).max(0.01));
        let h = perturb(REFERENCE_HEMATOXYLIN);
        let e = perturb(REFERENCE_EOSIN);
        let Ok(m) = StainMatrix::new(h, e) else { continue };
        if m.hematoxylin()[2] > m.eosin()[2] && m.column_angle() > 0.4 {
            return m;
        }
    }
}

/// Bilinear value noise with lattice spacing `cell`, values in [0, 1).
struct ValueNoise {
    cols: usize,
    cell: f64,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, width: usize, height: usize, cell: usize) -> Self {
        let cols = width / cell + 2;
        let rows = height / cell + 2;
        Self {
            cols,
            cell: cell as f64,
            lattice: (0..cols * rows).map(|_| rng.gen()).collect(),
        }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let fx = x as f64 / self.cell;
        let fy = y as f64 / self.cell;
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        // smoothstep keeps the field C1 across cells
        let (tx, ty) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let v = |cx: usize, cy: usize| self.lattice[cy * self.cols + cx];
        let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
        let bottom = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Density field with background, eosin-only stroma, hematoxylin-only
/// nuclei and mixed regions.
pub fn tissue_concentrations(width: usize, height: usize, seed: u64) -> Result<ConcentrationMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stroma = ValueNoise::new(&mut rng, width, height, 24);
    let mixing = ValueNoise::new(&mut rng, width, height, 12);
    let mut data = vec![0.0; width * height * 2];
    for y in 0..height {
        for x in 0..width {
            let s = stroma.at(x, y);
            if s < 0.25 {
                continue;
            }
            let i = (y * width + x) * 2;
            data[i + 1] = 0.2 + 0.9 * (s - 0.25) / 0.75;
            let m = mixing.at(x, y);
            if m > 0.6 {
                data[i] = 0.1 + 0.8 * (m - 0.6);
            }
        }
    }
    let nuclei = (width * height) / 220 + 1;
    for _ in 0..nuclei {
        let cx = rng.gen_range(0..width) as f64;
        let cy = rng.gen_range(0..height) as f64;
        let r: f64 = rng.gen_range(2.5..6.0);
        let density: f64 = rng.gen_range(0.6..1.2);
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize + 1).min(width));
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize + 1).min(height));
        for y in y0..y1 {
            for x in x0..x1 {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                if d2 <= r * r {
                    let i = (y * width + x) * 2;
                    data[i] = density * (1.0 - 0.3 * d2 / (r * r));
                    data[i + 1] = 0.0;
                }
            }
        }
    }
    ConcentrationMap::new(width, height, data)
}

/// Renders a density field with the given stains.
pub fn render(s: &ConcentrationMap, stains: &StainMatrix) -> RgbImage {
    reconstruct(s, stains, &OdConfig::default())
}

/// Tissue rendered with `stains`; returns the image and its density field.
pub fn tissue_image(
    width: usize,
    height: usize,
    stains: &StainMatrix,
    seed: u64,
) -> Result<(RgbImage, ConcentrationMap)> {
    let s = tissue_concentrations(width, height, seed)?;
    Ok((render(&s, stains), s))
}

/// Like [`tissue_image`] but every pixel carries only its dominant stain, the
/// sparse setting sparse factorization assumes.
pub fn sparse_tissue_image(
    width: usize,
    height: usize,
    stains: &StainMatrix,
    seed: u64,
) -> Result<(RgbImage, ConcentrationMap)> {
    let s = tissue_concentrations(width, height, seed)?;
    let data = s
        .pixels()
        .flat_map(|[h, e]| if h >= e { [h, 0.0] } else { [0.0, e] })
        .collect();
    let sparse = ConcentrationMap::new(width, height, data)?;
    Ok((render(&sparse, stains), sparse))
}
