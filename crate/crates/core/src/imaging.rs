//! Raster containers, grayscale conversion, bilinear resize and PNG I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "rgb buffer of {} bytes for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Result<Self> {
        let data = color
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, data)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Copies the `w`x`h` region at (`x0`, `y0`); cells outside the image take `fill`.
    pub fn crop_padded(&self, x0: usize, y0: usize, w: usize, h: usize, fill: [u8; 3]) -> Result<Self> {
        Self::from_fn(w, h, |x, y| {
            let (sx, sy) = (x0 + x, y0 + y);
            if sx < self.width && sy < self.height {
                self.pixel(sx, sy)
            } else {
                fill
            }
        })
    }
}

/// Single-channel raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimension { width, height });
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "gray buffer of {} values for {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParams(format!("gray value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
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

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Luma of one pixel with channels already scaled to [0, 1].
pub fn luma(rgb: [f64; 3]) -> f64 {
    LUMA[0] * rgb[0] + LUMA[1] * rgb[1] + LUMA[2] * rgb[2]
}

pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img
        .pixels()
        .map(|[r, g, b]| {
            // integer weights keep white at exactly 1.0
            let weighted = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
            weighted as f64 / 255_000.0
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize(img: &RgbImage, width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension { width, height });
    }
    if (width, height) == img.dims() {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let taps = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| taps(x, sx, img.width)).collect();
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, fy) = taps(y, sy, img.height);
        for &(x0, x1, fx) in &cols {
            let p00 = img.pixel(x0, y0);
            let p10 = img.pixel(x1, y0);
            let p01 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
                let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(width, height, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let decoded = reader.decode().map_err(|e| Error::MalformedRaster {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(buf) => buf,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLumaA8(_) => {
            decoded.to_rgb8()
        }
        other => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                layout: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    RgbImage::new(w, h, rgb.into_raw())
}

/// Encodes `img` as PNG and moves it into place only once fully written.
pub fn write_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .expect("buffer length checked at construction");
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::MalformedRaster {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    write_atomic(path, &bytes)
}

/// Writes through a sibling temp file and renames, so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_extremes() {
        let white = RgbImage::filled(3, 2, [255, 255, 255]).unwrap();
        assert!(to_grayscale(&white).data().iter().all(|&v| v == 1.0));
        let black = RgbImage::filled(3, 2, [0, 0, 0]).unwrap();
        assert!(to_grayscale(&black).data().iter().all(|&v| v == 0.0));
        let red = RgbImage::filled(1, 1, [255, 0, 0]).unwrap();
        assert!((to_grayscale(&red).data()[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn grayscale_range_exhaustive() {
        // every 8-bit triple, in slabs of one red value
        for r in 0..=255u8 {
            let img = RgbImage::from_fn(256, 256, |g, b| [r, g as u8, b as u8]).unwrap();
            let gray = to_grayscale(&img);
            assert!(gray.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn resize_dims_and_identity() {
        let img = RgbImage::from_fn(500, 500, |x, y| [(x % 256) as u8, (y % 256) as u8, 7]).unwrap();
        let small = resize(&img, 256, 256).unwrap();
        assert_eq!(small.dims(), (256, 256));
        assert_eq!(resize(&img, 500, 500).unwrap(), img);
        assert!(matches!(resize(&img, 0, 4), Err(Error::ZeroDimension { .. })));
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = RgbImage::filled(2, 2, [17, 200, 99]).unwrap();
        for (w, h) in [(1, 1), (3, 7), (64, 5), (2, 2)] {
            let out = resize(&img, w, h).unwrap();
            assert!(out.pixels().all(|p| p == [17, 200, 99]));
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = RgbImage::from_fn(13, 7, |x, y| [(x * 19) as u8, (y * 31) as u8, (x ^ y) as u8]).unwrap();
        write_image(&img, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), img);

        let one = RgbImage::filled(1, 1, [1, 2, 3]).unwrap();
        write_image(&one, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), one);
        // no temp files left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        assert!(matches!(read_image(&missing), Err(Error::MissingFile(_))));

        let path = dir.path().join("t.png");
        let img = RgbImage::filled(32, 32, [9, 9, 9]).unwrap();
        write_image(&img, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(read_image(&path), Err(Error::MalformedRaster { .. })));

        let deep = image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(2, 2, vec![1000u16; 12]).unwrap();
        let deep_path = dir.path().join("deep.png");
        deep.save(&deep_path).unwrap();
        assert!(matches!(read_image(&deep_path), Err(Error::UnsupportedBitDepth { .. })));
    }

    #[test]
    fn new_rejects_bad_buffers() {
        assert!(RgbImage::new(0, 3, vec![]).is_err());
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
    }
}
