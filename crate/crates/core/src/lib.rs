//! Stain normalization for H&E histopathology images.

// `!(x > 0.0)` is how parameter checks reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod macenko;
pub mod nn;
pub mod optical_density;
pub mod ssim;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod vahadane;
pub mod wsi;

pub use error::{Error, ImageRole, PatchFailure, Result};
pub use imaging::{GrayImage, RgbImage};
pub use optical_density::{ConcentrationMap, OdConfig, OdImage, StainMatrix};
