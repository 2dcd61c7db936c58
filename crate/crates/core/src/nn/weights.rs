//! Named-tensor weight archive.
//!
//! Little-endian layout:
//!
//! ```text
//! "SAAS"  u32 version  u32 count
//! count × { u32 name_len, name (utf-8), u32 rank, rank × u32 dim, f32 data }
//! u32 crc32 of every preceding byte
//! ```
//!
//! Architecture metadata travels as shape-`[1]` tensors named `meta.*`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::write_atomic;
use crate::tensor::Tensor;

use super::arch::{NetworkArch, NormKind, Parts, TensorRole};
use super::spectral;

pub const MAGIC: [u8; 4] = *b"SAAS";
pub const FORMAT_VERSION: u32 = 1;
/// Largest accepted spectral norm of a constrained weight.
pub const SPECTRAL_LIMIT: f64 = 1.0 + 1e-3;

const META_KEYS: [&str; 5] = [
    "meta.depth",
    "meta.base_channels",
    "meta.attn_min_res",
    "meta.attn_pool",
    "meta.norm",
];

/// An `f32` array exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.to_f64())
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Validated weights for the generator and, optionally, the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorWeights {
    arch: NetworkArch,
    parts: Parts,
    tensors: BTreeMap<String, WeightTensor>,
}

impl GeneratorWeights {
    /// Checks finiteness, the manifest and the spectral-norm bound.
    pub fn new(arch: NetworkArch, tensors: BTreeMap<String, WeightTensor>) -> Result<Self> {
        let w = Self::unchecked(arch, tensors)?;
        w.check_spectral()?;
        Ok(w)
    }

    /// As [`GeneratorWeights::new`] without the spectral-norm bound.
    pub fn unchecked(arch: NetworkArch, tensors: BTreeMap<String, WeightTensor>) -> Result<Self> {
        arch.validate()?;
        let parts = Parts {
            generator: true,
            discriminator: tensors.keys().any(|k| k.starts_with("disc.")),
        };
        for (name, t) in &tensors {
            if !t.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        let manifest = arch.manifest(parts);
        for (name, shape) in &manifest {
            match tensors.get(name) {
                None => return Err(Error::MissingTensor(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor `{name}`: expected {shape:?}, got {:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if tensors.len() != manifest.len() {
            let known: std::collections::HashSet<&str> = manifest.iter().map(|(n, _)| n.as_str()).collect();
            if let Some(extra) = tensors.keys().find(|k| !known.contains(k.as_str())) {
                return Err(Error::UnexpectedTensor(extra.clone()));
            }
        }
        Ok(Self { arch, parts, tensors })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn parts(&self) -> Parts {
        self.parts
    }

    pub fn has_discriminator(&self) -> bool {
        self.parts.discriminator
    }

    pub fn tensors(&self) -> &BTreeMap<String, WeightTensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&WeightTensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)?.to_tensor()
    }

    pub fn into_tensors(self) -> BTreeMap<String, WeightTensor> {
        self.tensors
    }

    /// `(name, σ)` for every constrained weight.
    pub fn spectral_norms(&self) -> Vec<(String, f64)> {
        self.tensors
            .iter()
            .filter(|(n, _)| TensorRole::of(n).is_spectral())
            .map(|(n, t)| (n.clone(), spectral::tensor_spectral_norm(TensorRole::of(n), t.shape(), &t.to_f64())))
            .collect()
    }

    fn check_spectral(&self) -> Result<()> {
        for (name, sigma) in self.spectral_norms() {
            if sigma > SPECTRAL_LIMIT {
                return Err(Error::SpectralNormViolation { name, sigma });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, WeightTensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let a = &self.arch;
        for (key, value) in META_KEYS.iter().zip([
            a.depth as f32,
            a.base_channels as f32,
            a.attention_min_res as f32,
            a.attention_pool as f32,
            a.norm.code() as f32,
        ]) {
            entries.push((key.to_string(), WeightTensor { shape: vec![1], data: vec![value] }));
        }
        encode(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, t) in decode(bytes)? {
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::DuplicateTensor(name));
            }
        }
        let mut meta = [0usize; 5];
        for (slot, key) in meta.iter_mut().zip(META_KEYS) {
            let t = tensors.remove(key).ok_or_else(|| Error::MissingTensor(key.to_string()))?;
            *slot = meta_value(key, &t)?;
        }
        let arch = NetworkArch {
            depth: meta[0],
            base_channels: meta[1],
            attention_min_res: meta[2],
            attention_pool: meta[3],
            norm: NormKind::from_code(meta[4] as u32)?,
        };
        Self::new(arch, tensors)
    }

    /// Returns a copy with every constrained weight divided by its spectral norm.
    pub fn apply_spectral_normalization(&self) -> Self {
        let mut out = self.clone();
        for (name, t) in out.tensors.iter_mut() {
            let role = TensorRole::of(name);
            if role.is_spectral() {
                let mut data = t.to_f64();
                spectral::normalize_in_place(role, &t.shape, &mut data);
                t.data = data.iter().map(|&v| v as f32).collect();
            }
        }
        out
    }
}

fn meta_value(key: &str, t: &WeightTensor) -> Result<usize> {
    match t.data() {
        [v] if v.is_finite() && *v >= 0.0 && v.fract() == 0.0 && *v < 1e6 => Ok(*v as usize),
        _ => Err(Error::BadMetadata(format!("`{key}` must be a single non-negative integer"))),
    }
}

pub fn apply_spectral_normalization(w: &GeneratorWeights) -> GeneratorWeights {
    w.apply_spectral_normalization()
}

fn encode(entries: &[(String, WeightTensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<(String, WeightTensor)>> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("missing header".into()));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::BadMetadata(format!("tensor {i} name is not utf-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::BadMetadata(format!("tensor `{name}` is too large")))?;
        let raw = r.take(n.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, WeightTensor { shape, data }));
    }
    if r.pos != body.len() {
        return Err(Error::BadMetadata(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_weights(w: &GeneratorWeights, path: &Path) -> Result<()> {
    write_atomic(path, &w.to_bytes())
}

pub fn load_weights(path: &Path) -> Result<GeneratorWeights> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    GeneratorWeights::from_bytes(&bytes)
}

/// Rewrites the archive with one tensor's payload replaced, recomputing the
/// checksum so that the loader reaches its semantic checks.
#[doc(hidden)]
pub fn rewrite_raw(bytes: &[u8], edit: impl FnOnce(&mut Vec<(String, WeightTensor)>)) -> Result<Vec<u8>> {
    let mut entries = decode(bytes)?;
    edit(&mut entries);
    Ok(encode(&entries))
}
