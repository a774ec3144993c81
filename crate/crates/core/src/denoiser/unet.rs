use candle_core::{DType, Device, Tensor};

use super::{cross_attention_delta, DenoiserConfig};
use crate::error::Result;
use crate::nn::{self, Attention, Conv2d, GroupNorm, LayerNorm, Layer, Linear, Module};
use crate::rng::{self, Rng};

#[derive(Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn init(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&format!("{prefix}.norm1"), c_in, dtype, device)?,
            conv1: Conv2d::init(format!("{prefix}.conv1"), c_in, c_out, 3, 1, rng, dtype, device)?,
            time_proj: Linear::init(
                format!("{prefix}.time_proj"),
                temb_dim,
                c_out,
                true,
                rng,
                dtype,
                device,
            )?,
            norm2: GroupNorm::new(&format!("{prefix}.norm2"), c_out, dtype, device)?,
            conv2: Conv2d::init(format!("{prefix}.conv2"), c_out, c_out, 3, 1, rng, dtype, device)?,
            skip: if c_in != c_out {
                Some(Conv2d::init(
                    format!("{prefix}.skip"),
                    c_in,
                    c_out,
                    1,
                    1,
                    rng,
                    dtype,
                    device,
                )?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time_proj.forward(&temb.silu()?)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

impl Module for ResBlock {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        self.norm1.collect(out);
        self.conv1.collect(out);
        self.time_proj.collect(out);
        self.norm2.collect(out);
        self.conv2.collect(out);
        self.skip.collect(out);
    }
}

/// Self-attention then cross-attention over the flattened feature map.
#[derive(Debug)]
struct AttnBlock {
    attn_norm: LayerNorm,
    attn: Attention,
    xattn_norm: LayerNorm,
    xattn: Attention,
}

impl AttnBlock {
    #[allow(clippy::too_many_arguments)]
    fn init(
        prefix: &str,
        channels: usize,
        cross_dim: usize,
        heads: usize,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            attn_norm: LayerNorm::new(&format!("{prefix}.attn_norm"), channels, dtype, device)?,
            attn: Attention::init(
                &format!("{prefix}.attn"),
                channels,
                channels,
                channels,
                heads,
                rng,
                dtype,
                device,
            )?,
            xattn_norm: LayerNorm::new(&format!("{prefix}.xattn_norm"), channels, dtype, device)?,
            xattn: Attention::init(
                &format!("{prefix}.xattn"),
                channels,
                cross_dim,
                channels,
                heads,
                rng,
                dtype,
                device,
            )?,
        })
    }

    fn forward(&self, x: &Tensor, c_adapted: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let normed = self.attn_norm.forward(&tokens)?;
        let tokens = (&tokens + self.attn.attend(&normed, &normed, None)?)?;
        let normed = self.xattn_norm.forward(&tokens)?;
        let tokens = (&tokens + cross_attention_delta(&normed, c_adapted, &self.xattn, mask)?)?;
        Ok(tokens.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
    }
}

impl Module for AttnBlock {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        self.attn_norm.collect(out);
        self.attn.collect(out);
        self.xattn_norm.collect(out);
        self.xattn.collect(out);
    }
}

#[derive(Debug)]
struct Level {
    res: ResBlock,
    attn: Option<AttnBlock>,
    /// Stride-2 conv on the way down, upsample+conv on the way up.
    resample: Option<Conv2d>,
}

impl Module for Level {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        self.res.collect(out);
        self.attn.collect(out);
        self.resample.collect(out);
    }
}

/// Encoder-decoder U-Net with skip connections. One ResBlock per level;
/// attention blocks sit at the two lowest resolutions and in the middle.
#[derive(Debug)]
pub struct UNet {
    cfg: DenoiserConfig,
    conv_in: Conv2d,
    time_mlp: (Linear, Linear),
    down: Vec<Level>,
    mid: (ResBlock, AttnBlock, ResBlock),
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(cfg: DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let rng = &mut rng;
        let base = cfg.base_channels;
        let temb_dim = 4 * base;
        let heads = cfg.num_heads;
        let channels: Vec<usize> = cfg.channel_multipliers.iter().map(|m| base * m).collect();
        let levels = channels.len();
        let has_attn = |i: usize| i + 2 >= levels;

        let conv_in = Conv2d::init("unet.conv_in", cfg.in_channels, base, 3, 1, rng, dtype, device)?;
        let time_mlp = (
            Linear::init("unet.time_mlp.0", base, temb_dim, true, rng, dtype, device)?,
            Linear::init("unet.time_mlp.1", temb_dim, temb_dim, true, rng, dtype, device)?,
        );

        let mut down = Vec::with_capacity(levels);
        let mut prev = base;
        for (i, &ch) in channels.iter().enumerate() {
            let prefix = format!("unet.down.{i}");
            down.push(Level {
                res: ResBlock::init(&format!("{prefix}.res"), prev, ch, temb_dim, rng, dtype, device)?,
                attn: if has_attn(i) {
                    Some(AttnBlock::init(&prefix, ch, cfg.cross_dim, heads, rng, dtype, device)?)
                } else {
                    None
                },
                resample: if i + 1 < levels {
                    Some(Conv2d::init(
                        format!("{prefix}.downsample"),
                        ch,
                        ch,
                        3,
                        2,
                        rng,
                        dtype,
                        device,
                    )?)
                } else {
                    None
                },
            });
            prev = ch;
        }

        let mid = (
            ResBlock::init("unet.mid.res1", prev, prev, temb_dim, rng, dtype, device)?,
            AttnBlock::init("unet.mid", prev, cfg.cross_dim, heads, rng, dtype, device)?,
            ResBlock::init("unet.mid.res2", prev, prev, temb_dim, rng, dtype, device)?,
        );

        let mut up = Vec::with_capacity(levels);
        for (i, &ch) in channels.iter().enumerate().rev() {
            let prefix = format!("unet.up.{i}");
            up.push(Level {
                res: ResBlock::init(
                    &format!("{prefix}.res"),
                    prev + ch,
                    ch,
                    temb_dim,
                    rng,
                    dtype,
                    device,
                )?,
                attn: if has_attn(i) {
                    Some(AttnBlock::init(&prefix, ch, cfg.cross_dim, heads, rng, dtype, device)?)
                } else {
                    None
                },
                resample: if i > 0 {
                    Some(Conv2d::init(
                        format!("{prefix}.upsample"),
                        ch,
                        ch,
                        3,
                        1,
                        rng,
                        dtype,
                        device,
                    )?)
                } else {
                    None
                },
            });
            prev = ch;
        }

        let norm_out = GroupNorm::new("unet.norm_out", prev, dtype, device)?;
        let conv_out = Conv2d::init("unet.conv_out", prev, cfg.in_channels, 3, 1, rng, dtype, device)?;
        Ok(Self {
            cfg,
            conv_in,
            time_mlp,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn forward(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        c_adapted: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let temb = nn::timestep_embedding(ts, self.cfg.base_channels, x_t.dtype(), x_t.device())?;
        let temb = self
            .time_mlp
            .1
            .forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;

        let mut h = self.conv_in.forward(x_t)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for level in &self.down {
            h = level.res.forward(&h, &temb)?;
            if let Some(attn) = &level.attn {
                h = attn.forward(&h, c_adapted, mask)?;
            }
            skips.push(h.clone());
            if let Some(down) = &level.resample {
                h = down.forward(&h)?;
            }
        }

        h = self.mid.0.forward(&h, &temb)?;
        h = self.mid.1.forward(&h, c_adapted, mask)?;
        h = self.mid.2.forward(&h, &temb)?;

        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            h = level.res.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
            if let Some(attn) = &level.attn {
                h = attn.forward(&h, c_adapted, mask)?;
            }
            if let Some(up) = &level.resample {
                h = up.forward(&nn::upsample2x(&h)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

impl Module for UNet {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        self.conv_in.collect(out);
        self.time_mlp.0.collect(out);
        self.time_mlp.1.collect(out);
        self.down.collect(out);
        self.mid.0.collect(out);
        self.mid.1.collect(out);
        self.mid.2.collect(out);
        self.up.collect(out);
        self.norm_out.collect(out);
        self.conv_out.collect(out);
    }
}
