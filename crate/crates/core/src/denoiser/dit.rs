use candle_core::{DType, Device, Tensor};

use super::{cross_attention_delta, DenoiserConfig};
use crate::error::{contract, Result};
use crate::nn::{self, Attention, Frozen, Layer, LayerNorm, Linear, Module};
use crate::rng::{self, Rng};

/// `(B, C, R, R)` -> `(B, (R/p)^2, C p p)`, patches in row-major order.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return contract(format!("{h}x{w} image not divisible into {patch}x{patch} patches"));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(x.reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, gh * gw, c * patch * patch))?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, channels: usize, resolution: usize, patch: usize) -> Result<Tensor> {
    let (b, n, d) = tokens.dims3()?;
    let g = resolution / patch;
    if patch == 0 || resolution % patch != 0 || n != g * g || d != channels * patch * patch {
        return contract(format!(
            "cannot unpatchify {:?} into {channels}x{resolution}x{resolution} with patch {patch}",
            tokens.dims()
        ));
    }
    Ok(tokens
        .reshape((b, g, g, channels, patch, patch))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, channels, resolution, resolution))?)
}

/// Fixed 2-D sine/cosine position table `(N, d)`: the first half of each
/// row encodes the patch row, the second half the patch column.
fn position_table(grid: usize, d: usize) -> Result<Vec<f64>> {
    let half = d / 2;
    let mut out = Vec::with_capacity(grid * grid * d);
    for r in 0..grid {
        for c in 0..grid {
            out.extend(nn::sinusoidal(r as f64, half)?);
            out.extend(nn::sinusoidal(c as f64, half)?);
        }
    }
    Ok(out)
}

#[derive(Debug)]
struct DitBlock {
    time_proj: Linear,
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    xattn: Attention,
    ln3: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl DitBlock {
    fn init(
        prefix: &str,
        cfg: &DenoiserConfig,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let d = cfg.base_channels;
        let heads = cfg.num_heads;
        Ok(Self {
            time_proj: Linear::init(format!("{prefix}.time_proj"), d, d, true, rng, dtype, device)?,
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d, dtype, device)?,
            attn: Attention::init(&format!("{prefix}.attn"), d, d, d, heads, rng, dtype, device)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d, dtype, device)?,
            xattn: Attention::init(
                &format!("{prefix}.xattn"),
                d,
                cfg.cross_dim,
                d,
                heads,
                rng,
                dtype,
                device,
            )?,
            ln3: LayerNorm::new(&format!("{prefix}.ln3"), d, dtype, device)?,
            fc1: Linear::init(format!("{prefix}.mlp.fc1"), d, 4 * d, true, rng, dtype, device)?,
            fc2: Linear::init(format!("{prefix}.mlp.fc2"), 4 * d, d, true, rng, dtype, device)?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor, c_adapted: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = x.broadcast_add(&self.time_proj.forward(&temb.silu()?)?.unsqueeze(1)?)?;
        let h = self.ln1.forward(&x)?;
        let x = (&x + self.attn.attend(&h, &h, None)?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + cross_attention_delta(&h, c_adapted, &self.xattn, mask)?)?;
        let h = self.ln3.forward(&x)?;
        Ok((&x + self.fc2.forward(&self.fc1.forward(&h)?.gelu()?)?)?)
    }
}

impl Module for DitBlock {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        self.time_proj.collect(out);
        self.ln1.collect(out);
        self.attn.collect(out);
        self.ln2.collect(out);
        self.xattn.collect(out);
        self.ln3.collect(out);
        self.fc1.collect(out);
        self.fc2.collect(out);
    }
}

/// Diffusion transformer over image patches with per-block cross-attention.
#[derive(Debug)]
pub struct Dit {
    cfg: DenoiserConfig,
    patch_embed: Linear,
    pos_emb: Frozen,
    time_mlp: (Linear, Linear),
    blocks: Vec<DitBlock>,
    ln_out: LayerNorm,
    head: Linear,
}

impl Dit {
    pub fn new(cfg: DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let rng = &mut rng;
        let d = cfg.base_channels;
        let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
        let grid = cfg.resolution / cfg.patch_size;
        let pos = Tensor::from_vec(position_table(grid, d)?, (grid * grid, d), device)?
            .to_dtype(dtype)?;
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::init(&format!("dit.blocks.{i}"), &cfg, rng, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed: Linear::init("dit.patch_embed", patch_dim, d, true, rng, dtype, device)?,
            pos_emb: Frozen::new("dit.pos_emb", pos),
            time_mlp: (
                Linear::init("dit.time_mlp.0", d, d, true, rng, dtype, device)?,
                Linear::init("dit.time_mlp.1", d, d, true, rng, dtype, device)?,
            ),
            blocks,
            ln_out: LayerNorm::new("dit.ln_out", d, dtype, device)?,
            head: Linear::init("dit.head", d, patch_dim, true, rng, dtype, device)?,
            cfg,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn num_tokens(&self) -> usize {
        let g = self.cfg.resolution / self.cfg.patch_size;
        g * g
    }

    pub fn forward(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        c_adapted: &Tensor,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let d = self.cfg.base_channels;
        let temb = nn::timestep_embedding(ts, d, x_t.dtype(), x_t.device())?;
        let temb = self
            .time_mlp
            .1
            .forward(&self.time_mlp.0.forward(&temb)?.silu()?)?;
        let tokens = patchify(x_t, self.cfg.patch_size)?;
        let mut h = self
            .patch_embed
            .forward(&tokens)?
            .broadcast_add(&self.pos_emb.tensor.unsqueeze(0)?)?;
        for block in &self.blocks {
            h = block.forward(&h, &temb, c_adapted, mask)?;
        }
        let out = self.head.forward(&self.ln_out.forward(&h)?)?;
        unpatchify(&out, self.cfg.in_channels, self.cfg.resolution, self.cfg.patch_size)
    }
}

impl Module for Dit {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        self.patch_embed.collect(out);
        out.push(Layer::Frozen(&self.pos_emb));
        self.time_mlp.0.collect(out);
        self.time_mlp.1.collect(out);
        self.blocks.collect(out);
        self.ln_out.collect(out);
        self.head.collect(out);
    }
}
