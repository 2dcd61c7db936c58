//! Inference-mode generator and discriminator.

use crate::attention::{attention_forward_spatial, AttentionParams};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::tensor::Tensor;

use super::arch::{NetworkArch, NormKind, DISCRIMINATOR_BLOCKS};
use super::ops::{
    batch_norm, concat_channels, conv2d, conv_transpose2d, instance_norm, leaky_relu, relu, tanh, PADDING,
};
use super::weights::GeneratorWeights;

/// 8-bit RGB to a `[3, h, w]` tensor in `[−1, 1]`.
pub fn to_model_space(img: &RgbImage) -> Tensor {
    let (w, h) = img.dims();
    let n = w * h;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("pixel values are finite")
}

/// Inverse of [`to_model_space`], rounding and clamping to 8 bits.
pub fn from_model_space(t: &Tensor) -> Result<RgbImage> {
    let (h, w) = match t.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::ShapeMismatch(format!("expected [3, h, w], got {s:?}"))),
    };
    let n = w * h;
    let d = t.data();
    RgbImage::from_fn(w, h, |x, y| {
        let i = y * w + x;
        [0, 1, 2].map(|c| ((d[c * n + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
    })
}

#[derive(Debug, Clone)]
enum Norm {
    None,
    Batch {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Instance {
        gamma: Vec<f64>,
        beta: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Relu,
    Leaky,
}

#[derive(Debug, Clone)]
struct Block {
    weight: Tensor,
    bias: Tensor,
    transposed: bool,
    norm: Norm,
    attention: Option<AttentionParams>,
}

fn load_block(w: &GeneratorWeights, prefix: &str, layer: &str, kind: NormKind) -> Result<Block> {
    let get = |s: &str| -> Result<Vec<f64>> { Ok(w.get(&format!("{prefix}.norm.{s}"))?.to_f64()) };
    let norm = match kind {
        NormKind::None => Norm::None,
        NormKind::Batch => Norm::Batch {
            gamma: get("weight")?,
            beta: get("bias")?,
            mean: get("running_mean")?,
            var: get("running_var")?,
        },
        NormKind::Instance => Norm::Instance {
            gamma: get("weight")?,
            beta: get("bias")?,
        },
    };
    let weight = w.tensor(&format!("{prefix}.{layer}.weight"))?;
    let attn_key = format!("{prefix}.attn.wq");
    let attention = if w.tensors().contains_key(&attn_key) {
        let mu = w.get(&format!("{prefix}.attn.mu"))?.to_f64()[0];
        Some(AttentionParams::new(
            w.tensor(&attn_key)?,
            w.tensor(&format!("{prefix}.attn.wk"))?,
            w.tensor(&format!("{prefix}.attn.wv"))?,
            mu,
        )?)
    } else {
        None
    };
    Ok(Block {
        weight,
        bias: w.tensor(&format!("{prefix}.{layer}.bias"))?,
        transposed: layer == "deconv",
        norm,
        attention,
    })
}

fn load_layer(w: &GeneratorWeights, prefix: &str, layer: &str) -> Result<Block> {
    load_block(w, prefix, layer, NormKind::None)
}

impl Block {
    fn linear(&self, x: &Tensor, stride: usize) -> Result<Tensor> {
        if self.transposed {
            conv_transpose2d(x, &self.weight, &self.bias, stride, PADDING)
        } else {
            conv2d(x, &self.weight, &self.bias, stride, PADDING)
        }
    }

    fn forward(&self, x: &Tensor, act: Activation, arch: &NetworkArch, attention: bool) -> Result<Tensor> {
        let y = self.linear(x, 2)?;
        let y = match &self.norm {
            Norm::None => y,
            Norm::Batch { gamma, beta, mean, var } => batch_norm(&y, gamma, beta, mean, var)?,
            Norm::Instance { gamma, beta } => instance_norm(&y, gamma, beta)?,
        };
        let y = match act {
            Activation::Relu => relu(&y),
            Activation::Leaky => leaky_relu(&y),
        };
        match (&self.attention, attention) {
            (Some(p), true) => {
                let side = y.shape()[1].max(y.shape()[2]);
                let pool = if side > arch.attention_min_res { arch.attention_pool } else { 1 };
                attention_forward_spatial(&y, p, pool)
            }
            _ => Ok(y),
        }
    }
}

/// Switches for structural ablations of the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Run the attention layers; off behaves as if they were removed.
    pub attention: bool,
    /// Replace the skip tensor of this encoder level with zeros.
    pub drop_skip: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            attention: true,
            drop_skip: None,
        }
    }
}

/// U-Net generator with weights unpacked to `f64`; shareable across threads.
#[derive(Debug, Clone)]
pub struct Generator {
    arch: NetworkArch,
    encoder: Vec<Block>,
    /// Innermost first: levels `depth−1` down to 1.
    decoder: Vec<Block>,
    out: Block,
}

impl Generator {
    pub fn new(w: &GeneratorWeights) -> Result<Self> {
        let arch = *w.arch();
        let encoder = (0..arch.depth)
            .map(|i| load_block(w, &format!("gen.enc{i}"), "conv", arch.norm))
            .collect::<Result<_>>()?;
        let decoder = (1..arch.depth)
            .rev()
            .map(|i| load_block(w, &format!("gen.dec{i}"), "deconv", arch.norm))
            .collect::<Result<_>>()?;
        let out = load_layer(w, "gen.out", "deconv")?;
        Ok(Self {
            arch,
            encoder,
            decoder,
            out,
        })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, ForwardOptions::default())
    }

    /// Maps a `[3, h, w]` model-space tensor; `h` and `w` must be multiples of `2^depth`.
    pub fn forward_with(&self, x: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let (h, w) = match x.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::ShapeMismatch(format!("generator input must be [3, h, w], got {s:?}"))),
        };
        let m = self.arch.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::InvalidParams(format!(
                "generator input {w}x{h} must be a non-empty multiple of {m} on each side"
            )));
        }
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut cur = x.clone();
        for b in &self.encoder {
            cur = b.forward(&cur, Activation::Relu, &self.arch, opts.attention)?;
            skips.push(cur.clone());
        }
        if let Some(level) = opts.drop_skip {
            if let Some(s) = skips.get_mut(level) {
                *s = Tensor::zeros(s.shape().to_vec());
            }
        }
        let depth = self.arch.depth;
        let mut d = skips[depth - 1].clone();
        for (b, level) in self.decoder.iter().zip((1..depth).rev()) {
            let input = if level == depth - 1 { d } else { concat_channels(&d, &skips[level])? };
            d = b.forward(&input, Activation::Relu, &self.arch, opts.attention)?;
        }
        let y = self.out.linear(&concat_channels(&d, &skips[0])?, 2)?;
        Ok(tanh(&y))
    }

    pub fn forward_image(&self, img: &RgbImage) -> Result<RgbImage> {
        from_model_space(&self.forward_tensor(&to_model_space(img))?)
    }
}

/// One-shot generator pass on an 8-bit image; output dims equal input dims.
pub fn generator_forward(img: &RgbImage, w: &GeneratorWeights) -> Result<RgbImage> {
    Generator::new(w)?.forward_image(img)
}

/// Patch discriminator returning raw logits.
#[derive(Debug, Clone)]
pub struct Discriminator {
    arch: NetworkArch,
    blocks: Vec<Block>,
    out: Block,
}

impl Discriminator {
    pub fn new(w: &GeneratorWeights) -> Result<Self> {
        if !w.has_discriminator() {
            return Err(Error::MissingTensor("disc.out.conv.weight".into()));
        }
        let arch = *w.arch();
        let blocks = (0..DISCRIMINATOR_BLOCKS)
            .map(|i| load_block(w, &format!("disc.blk{i}"), "conv", arch.norm))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch,
            blocks,
            out: load_layer(w, "disc.out", "conv")?,
        })
    }

    /// `[h', w']` logit map and its mean.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        if x.shape().first() != Some(&3) || x.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator input must be [3, h, w], got {:?}",
                x.shape()
            )));
        }
        let mut cur = x.clone();
        for b in &self.blocks {
            cur = b.forward(&cur, Activation::Leaky, &self.arch, true)?;
        }
        let y = self.out.linear(&cur, 1)?;
        let (h, w) = (y.shape()[1], y.shape()[2]);
        let mean = crate::stats::mean(y.data());
        Ok((y.reshape(vec![h, w])?, mean))
    }

    pub fn forward_image(&self, img: &RgbImage) -> Result<(Tensor, f64)> {
        self.forward_tensor(&to_model_space(img))
    }
}

pub fn discriminator_forward(img: &RgbImage, w: &GeneratorWeights) -> Result<(Tensor, f64)> {
    Discriminator::new(w)?.forward_image(img)
}
