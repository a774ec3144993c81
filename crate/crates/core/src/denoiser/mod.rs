//! Epsilon-predicting vision models: a U-Net with ResBlocks, self- and
//! cross-attention, and a patch-token diffusion transformer.

mod dit;
mod unet;

pub use dit::{patchify, unpatchify, Dit};
pub use unet::UNet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::nn::{self, Attention, Layer, Module};

/// Image features seen by an attention layer: `(B, N, C)` tokens.
pub type ImageFeatures = Tensor;

/// `W_q`, `W_k`, `W_v` and the output projection of a cross-attention layer.
pub type CrossAttentionWeights = Attention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    Unet,
    Dit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    /// U-Net: channels at full resolution. DiT: token width.
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub depth: usize,
    /// Width of the (adapted) text rows fed to cross-attention keys/values.
    pub cross_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub resolution: usize,
}

impl DenoiserConfig {
    /// `unet-small`, `unet-base` or `dit-base` at the given resolution.
    pub fn preset(name: &str, resolution: usize) -> Result<Self> {
        let unet = |base: usize, cross_dim: usize| Self {
            kind: DenoiserKind::Unet,
            base_channels: base,
            channel_multipliers: vec![1, 2, 2],
            depth: 0,
            cross_dim,
            num_heads: 4,
            patch_size: 1,
            in_channels: 3,
            resolution,
        };
        let cfg = match name {
            "unet-small" => unet(32, 64),
            "unet-base" => unet(64, 128),
            "dit-base" => Self {
                kind: DenoiserKind::Dit,
                base_channels: 128,
                channel_multipliers: Vec::new(),
                depth: 6,
                cross_dim: 128,
                num_heads: 4,
                patch_size: 4,
                in_channels: 3,
                resolution,
            },
            other => return config(format!("unknown vision preset {other:?}")),
        };
        Ok(cfg)
    }

    /// Resolution-8 U-Net used for finite-difference checks.
    pub fn tiny_unet() -> Self {
        Self {
            kind: DenoiserKind::Unet,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            depth: 0,
            cross_dim: 8,
            num_heads: 2,
            patch_size: 1,
            in_channels: 3,
            resolution: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.cross_dim == 0 {
            return config("num_heads and cross_dim must be positive");
        }
        if self.cross_dim % self.num_heads != 0 {
            return config(format!(
                "cross_dim {} not divisible by num_heads {}",
                self.cross_dim, self.num_heads
            ));
        }
        match self.kind {
            DenoiserKind::Unet => {
                let levels = self.channel_multipliers.len();
                if levels == 0 {
                    return config("a U-Net needs at least one channel multiplier");
                }
                if self.base_channels % 2 != 0 {
                    return config("U-Net base_channels must be even");
                }
                let factor = 1usize << (levels - 1);
                if self.resolution % factor != 0 {
                    return config(format!(
                        "resolution {} not divisible by 2^{}",
                        self.resolution,
                        levels - 1
                    ));
                }
                for m in &self.channel_multipliers {
                    if (self.base_channels * m) % self.num_heads != 0 {
                        return config(format!(
                            "{} channels not divisible by {} heads",
                            self.base_channels * m,
                            self.num_heads
                        ));
                    }
                }
            }
            DenoiserKind::Dit => {
                if self.patch_size == 0 || self.resolution % self.patch_size != 0 {
                    return config(format!(
                        "resolution {} not divisible by patch size {}",
                        self.resolution, self.patch_size
                    ));
                }
                if self.base_channels % self.num_heads != 0 {
                    return config("DiT width not divisible by num_heads");
                }
                if self.base_channels % 4 != 0 {
                    return config("DiT width must be a multiple of 4");
                }
            }
        }
        Ok(())
    }
}

/// Cross-attention with residual: `z + O(softmax(Q K^T / sqrt(d_head)) V)`
/// where `Q` comes from `z` and `K`, `V` from `c_adapted`. Masked text
/// positions get a `-inf` score.
pub fn cross_attention(
    z: &ImageFeatures,
    c_adapted: &Tensor,
    w: &CrossAttentionWeights,
    mask: &Tensor,
) -> Result<ImageFeatures> {
    Ok((z + cross_attention_delta(z, c_adapted, w, mask)?)?)
}

/// The cross-attention branch without the residual add.
pub(crate) fn cross_attention_delta(
    query: &Tensor,
    c_adapted: &Tensor,
    w: &CrossAttentionWeights,
    mask: &Tensor,
) -> Result<Tensor> {
    let (b, l, d) = c_adapted.dims3()?;
    if d != w.k.d_in() {
        return contract(format!(
            "text rows are {d} wide but cross-attention expects {}",
            w.k.d_in()
        ));
    }
    if mask.dims2()? != (b, l) {
        return contract(format!(
            "mask shape {:?} does not match text batch ({b}, {l})",
            mask.dims()
        ));
    }
    let bias = nn::key_padding_bias(mask, query.dtype())?;
    w.attend(query, c_adapted, Some(&bias))
}

/// Either vision backbone.
#[derive(Debug)]
pub enum Denoiser {
    Unet(UNet),
    Dit(Dit),
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            DenoiserKind::Unet => Denoiser::Unet(UNet::new(cfg, seed, dtype, device)?),
            DenoiserKind::Dit => Denoiser::Dit(Dit::new(cfg, seed, dtype, device)?),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        match self {
            Denoiser::Unet(m) => m.config(),
            Denoiser::Dit(m) => m.config(),
        }
    }

    pub fn cross_dim(&self) -> usize {
        self.config().cross_dim
    }

    /// Predicts `eps` with the same shape as `x_t`.
    pub fn forward(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        c_adapted: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let cfg = self.config();
        let (b, c, h, w) = x_t.dims4()?;
        if c != cfg.in_channels || h != cfg.resolution || w != cfg.resolution {
            return contract(format!(
                "input {:?} does not match a {}-channel {}x{} model",
                x_t.dims(),
                cfg.in_channels,
                cfg.resolution,
                cfg.resolution
            ));
        }
        if ts.len() != b {
            return contract(format!("{} timesteps for batch of {b}", ts.len()));
        }
        if c_adapted.dims3()?.0 != b {
            return contract("text batch does not match image batch");
        }
        match self {
            Denoiser::Unet(m) => m.forward(x_t, ts, c_adapted, mask),
            Denoiser::Dit(m) => m.forward(x_t, ts, c_adapted, mask),
        }
    }
}

impl Module for Denoiser {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        match self {
            Denoiser::Unet(m) => m.collect(out),
            Denoiser::Dit(m) => m.collect(out),
        }
    }
}
