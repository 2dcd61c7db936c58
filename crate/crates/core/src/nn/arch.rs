//! Network topology and the tensor manifest a weight file must satisfy.
//!
//! Generator (U-Net, `depth` levels, `ch(i) = min(base·2^i, 512)`):
//!
//! ```text
//! enc{i}  conv k4 s2 p1 -> norm -> relu -> attention      i = 0..depth
//! dec{i}  deconv k4 s2 p1 -> norm -> relu -> attention    i = depth-1 ..= 1
//!         input: enc{depth-1} output for the innermost, otherwise
//!         concat(dec{i+1} output, enc{i} output)
//! out     deconv k4 s2 p1 on concat(dec1 output, enc0 output) -> tanh
//! ```
//!
//! Discriminator: three `conv k4 s2 p1 -> norm -> leaky relu(0.2) -> attention`
//! blocks followed by a one-channel `conv k4 s1 p1`, so a 256×256 input gives a
//! 31×31 logit map.
//!
//! Attention follows a block only when its channel count is a multiple of 8.

use crate::error::{Error, Result};

pub const MAX_CHANNELS: usize = 512;
pub const DISCRIMINATOR_BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    None,
    Batch,
    Instance,
}

impl NormKind {
    pub fn code(self) -> u32 {
        match self {
            NormKind::None => 0,
            NormKind::Batch => 1,
            NormKind::Instance => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(NormKind::None),
            1 => Ok(NormKind::Batch),
            2 => Ok(NormKind::Instance),
            c => Err(Error::BadMetadata(format!("unknown norm code {c}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkArch {
    /// Number of encoder blocks.
    pub depth: usize,
    pub base_channels: usize,
    /// Largest feature-map side at which attention runs on un-pooled keys.
    pub attention_min_res: usize,
    /// Key/value average-pool factor above `attention_min_res`.
    pub attention_pool: usize,
    pub norm: NormKind,
}

impl Default for NetworkArch {
    fn default() -> Self {
        Self {
            depth: 6,
            base_channels: 64,
            attention_min_res: 32,
            attention_pool: 2,
            norm: NormKind::Batch,
        }
    }
}

/// Which networks a weight file carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    pub generator: bool,
    pub discriminator: bool,
}

impl Parts {
    pub const GENERATOR: Parts = Parts {
        generator: true,
        discriminator: false,
    };
    pub const BOTH: Parts = Parts {
        generator: true,
        discriminator: true,
    };
}

/// Kind of a manifest entry, which decides spectral-norm treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Conv,
    Deconv,
    Projection,
    Other,
}

impl TensorRole {
    pub fn of(name: &str) -> Self {
        if name.ends_with(".conv.weight") {
            TensorRole::Conv
        } else if name.ends_with(".deconv.weight") {
            TensorRole::Deconv
        } else if name.ends_with(".attn.wq") || name.ends_with(".attn.wk") || name.ends_with(".attn.wv") {
            TensorRole::Projection
        } else {
            TensorRole::Other
        }
    }

    pub fn is_spectral(self) -> bool {
        !matches!(self, TensorRole::Other)
    }
}

impl NetworkArch {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.base_channels == 0 || self.attention_pool == 0 {
            return Err(Error::BadMetadata(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        let mut c = self.base_channels;
        for _ in 0..level {
            c = (c * 2).min(MAX_CHANNELS);
        }
        c.min(MAX_CHANNELS)
    }

    pub fn has_attention(channels: usize) -> bool {
        channels >= 8 && channels.is_multiple_of(8)
    }

    /// Required input side multiple for the generator.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Input and output channels of decoder block `level` (`1..depth`).
    pub fn decoder_io(&self, level: usize) -> (usize, usize) {
        let input = if level == self.depth - 1 {
            self.channels(level)
        } else {
            2 * self.channels(level)
        };
        (input, self.channels(level - 1))
    }

    /// Every tensor name and shape the given parts require, metadata excluded.
    pub fn manifest(&self, parts: Parts) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        if parts.generator {
            let mut cin = 3;
            for i in 0..self.depth {
                let c = self.channels(i);
                block_entries(&mut out, &format!("gen.enc{i}"), "conv", vec![c, cin, 4, 4], c, self.norm);
                cin = c;
            }
            for i in (1..self.depth).rev() {
                let (input, c) = self.decoder_io(i);
                block_entries(&mut out, &format!("gen.dec{i}"), "deconv", vec![input, c, 4, 4], c, self.norm);
            }
            out.push(("gen.out.deconv.weight".into(), vec![2 * self.channels(0), 3, 4, 4]));
            out.push(("gen.out.deconv.bias".into(), vec![3]));
        }
        if parts.discriminator {
            let mut cin = 3;
            for i in 0..DISCRIMINATOR_BLOCKS {
                let c = self.channels(i);
                block_entries(&mut out, &format!("disc.blk{i}"), "conv", vec![c, cin, 4, 4], c, self.norm);
                cin = c;
            }
            out.push(("disc.out.conv.weight".into(), vec![1, cin, 4, 4]));
            out.push(("disc.out.conv.bias".into(), vec![1]));
        }
        out
    }
}

fn block_entries(
    out: &mut Vec<(String, Vec<usize>)>,
    prefix: &str,
    layer: &str,
    weight_shape: Vec<usize>,
    channels: usize,
    norm: NormKind,
) {
    out.push((format!("{prefix}.{layer}.weight"), weight_shape));
    out.push((format!("{prefix}.{layer}.bias"), vec![channels]));
    match norm {
        NormKind::None => {}
        NormKind::Instance => {
            out.push((format!("{prefix}.norm.weight"), vec![channels]));
            out.push((format!("{prefix}.norm.bias"), vec![channels]));
        }
        NormKind::Batch => {
            for p in ["weight", "bias", "running_mean", "running_var"] {
                out.push((format!("{prefix}.norm.{p}"), vec![channels]));
            }
        }
    }
    if NetworkArch::has_attention(channels) {
        out.push((format!("{prefix}.attn.wq"), vec![channels / 8, channels]));
        out.push((format!("{prefix}.attn.wk"), vec![channels / 8, channels]));
        out.push((format!("{prefix}.attn.wv"), vec![channels, channels]));
        out.push((format!("{prefix}.attn.mu"), vec![1]));
    }
}
