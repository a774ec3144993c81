//! Layers shared by the text encoders and the denoisers.
//!
//! Base weights are plain tensors, so they never appear in a gradient
//! store. The only trainable state in a model is whatever `LoraDelta` gets
//! attached to a [`Linear`] or [`Conv2d`] slot at injection time.

use std::sync::OnceLock;

use candle_core::{DType, Device, Tensor, D};

use crate::bridge::lora::{
    lora_conv_forward, lora_linear_forward, ConvGeometry, DeltaKind, LoraDelta,
};
use crate::error::{contract, Error, Result};
use crate::rng::{self, Rng};

/// Frozen named tensor (embeddings, norm affine parameters).
#[derive(Debug, Clone)]
pub struct Frozen {
    pub name: String,
    pub tensor: Tensor,
}

impl Frozen {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

/// A parameterised layer reached while walking a model.
#[derive(Debug, Clone, Copy)]
pub enum Layer<'a> {
    Linear(&'a Linear),
    Conv(&'a Conv2d),
    Frozen(&'a Frozen),
}

/// Anything that owns layers. `collect` must visit them in a fixed order;
/// injection-site reports and trainable-parameter lists inherit it.
pub trait Module {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>);

    fn layers(&self) -> Vec<Layer<'_>> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    /// Every frozen tensor with its fully qualified name.
    fn base_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for layer in self.layers() {
            match layer {
                Layer::Linear(l) => {
                    out.push((format!("{}.weight", l.name), l.weight.clone()));
                    if let Some(b) = &l.bias {
                        out.push((format!("{}.bias", l.name), b.clone()));
                    }
                }
                Layer::Conv(c) => {
                    out.push((format!("{}.weight", c.name), c.weight.clone()));
                    if let Some(b) = &c.bias {
                        out.push((format!("{}.bias", c.name), b.clone()));
                    }
                }
                Layer::Frozen(f) => out.push((f.name.clone(), f.tensor.clone())),
            }
        }
        out
    }
}

impl<T: Module> Module for Vec<T> {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        for m in self {
            m.collect(out);
        }
    }
}

impl<T: Module> Module for Option<T> {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        if let Some(m) = self {
            m.collect(out);
        }
    }
}

/// Frozen linear map with an optional LoRA slot that can be filled once.
#[derive(Debug)]
pub struct Linear {
    pub name: String,
    /// `d_out x d_in`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    lora: OnceLock<LoraDelta>,
}

impl Linear {
    pub fn new(name: impl Into<String>, weight: Tensor, bias: Option<Tensor>) -> Self {
        Self {
            name: name.into(),
            weight,
            bias,
            lora: OnceLock::new(),
        }
    }

    pub fn init(
        name: impl Into<String>,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = rng::uniform(rng, (d_out, d_in), bound, dtype, device)?;
        let bias = if with_bias {
            Some(rng::uniform(rng, d_out, bound, dtype, device)?)
        } else {
            None
        };
        Ok(Self::new(name, weight, bias))
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn delta_kind(&self) -> DeltaKind {
        DeltaKind::Linear {
            d_in: self.d_in(),
            d_out: self.d_out(),
        }
    }

    pub fn lora(&self) -> Option<&LoraDelta> {
        self.lora.get()
    }

    pub fn attach(&self, delta: LoraDelta) -> Result<()> {
        self.lora
            .set(delta)
            .map_err(|_| Error::Config(format!("layer {} already carries a LoRA delta", self.name)))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        lora_linear_forward(&self.weight, self.bias.as_ref(), self.lora(), x)
    }
}

impl Module for Linear {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        out.push(Layer::Linear(self));
    }
}

/// Frozen 2-D convolution with an optional LoRA slot.
#[derive(Debug)]
pub struct Conv2d {
    pub name: String,
    /// `c_out x c_in x k x k`.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub geometry: ConvGeometry,
    lora: OnceLock<LoraDelta>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = rng::uniform(rng, (c_out, c_in, kernel, kernel), bound, dtype, device)?;
        let bias = rng::uniform(rng, c_out, bound, dtype, device)?;
        Ok(Self {
            name: name.into(),
            weight,
            bias: Some(bias),
            geometry: ConvGeometry {
                stride,
                padding: kernel / 2,
            },
            lora: OnceLock::new(),
        })
    }

    pub fn delta_kind(&self) -> DeltaKind {
        let (c_out, c_in, kernel, _) = self.weight.dims4().expect("conv weight is 4-D");
        DeltaKind::Conv {
            c_in,
            c_out,
            kernel,
        }
    }

    pub fn lora(&self) -> Option<&LoraDelta> {
        self.lora.get()
    }

    pub fn attach(&self, delta: LoraDelta) -> Result<()> {
        self.lora
            .set(delta)
            .map_err(|_| Error::Config(format!("layer {} already carries a LoRA delta", self.name)))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        lora_conv_forward(
            &self.weight,
            self.bias.as_ref(),
            self.geometry,
            self.lora(),
            x,
        )
    }
}

impl Module for Conv2d {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        out.push(Layer::Conv(self));
    }
}

const NORM_EPS: f64 = 1e-5;

/// Layer norm over the trailing axis.
#[derive(Debug)]
pub struct LayerNorm {
    pub weight: Frozen,
    pub bias: Frozen,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            weight: Frozen::new(format!("{name}.weight"), Tensor::ones(dim, dtype, device)?),
            bias: Frozen::new(format!("{name}.bias"), Tensor::zeros(dim, dtype, device)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.tensor)?
            .broadcast_add(&self.bias.tensor)?)
    }
}

impl Module for LayerNorm {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        out.push(Layer::Frozen(&self.weight));
        out.push(Layer::Frozen(&self.bias));
    }
}

/// Group norm over `(B, C, H, W)` feature maps.
#[derive(Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub weight: Frozen,
    pub bias: Frozen,
}

impl GroupNorm {
    /// Uses up to 8 groups, the largest count that divides `channels`.
    pub fn new(name: &str, channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let groups = (1..=8.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Ok(Self {
            groups,
            weight: Frozen::new(
                format!("{name}.weight"),
                Tensor::ones(channels, dtype, device)?,
            ),
            bias: Frozen::new(format!("{name}.bias"), Tensor::zeros(channels, dtype, device)?),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let grouped = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let centered = grouped.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.tensor.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.tensor.reshape((1, c, 1, 1))?)?)
    }
}

impl Module for GroupNorm {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        out.push(Layer::Frozen(&self.weight));
        out.push(Layer::Frozen(&self.bias));
    }
}

/// Softmax over the last axis with the row max subtracted first. Entries at
/// `-inf` get weight exactly zero.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Additive key bias `(B, 1, 1, L)`: 0 where `mask` is 1, `-inf` elsewhere.
pub fn key_padding_bias(mask: &Tensor, dtype: DType) -> Result<Tensor> {
    let (b, l) = mask.dims2()?;
    let m = mask.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let bias: Vec<f64> = m
        .into_iter()
        .map(|v| if v > 0.5 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Ok(Tensor::from_vec(bias, (b, 1, 1, l), mask.device())?.to_dtype(dtype)?)
}

/// Additive causal bias `(1, 1, L, L)`.
pub fn causal_bias(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let bias: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { f64::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(bias, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

/// Multi-head scaled dot-product attention.
///
/// `q`: `(B, N, D)`, `k`/`v`: `(B, L, D)`; `bias` broadcasts to
/// `(B, heads, N, L)`. Returns `(B, N, D)` before any output projection.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, n, d) = q.dims3()?;
    let (kb, l, kd) = k.dims3()?;
    if kb != b || kd != d || v.dims3()? != (b, l, d) {
        return contract(format!(
            "attention shapes disagree: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        ));
    }
    if d % heads != 0 {
        return contract(format!("attention dim {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((b, len, heads, dh))?
            .transpose(1, 2)?
            .contiguous()?)
    };
    let (q, k, v) = (split(q, n)?, split(k, l)?, split(v, l)?);
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
    let scores = match bias {
        Some(bias) => scores.broadcast_add(bias)?,
        None => scores,
    };
    let weights = softmax_last(&scores)?;
    let out = weights.matmul(&v)?;
    Ok(out.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?)
}

/// Query, key, value and output projections around [`attention`]. Queries
/// come from `d_query`-wide inputs, keys and values from `d_context`-wide
/// ones.
#[derive(Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        prefix: &str,
        d_query: usize,
        d_context: usize,
        d_attn: usize,
        heads: usize,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::init(format!("{prefix}.q"), d_query, d_attn, false, rng, dtype, device)?,
            k: Linear::init(format!("{prefix}.k"), d_context, d_attn, false, rng, dtype, device)?,
            v: Linear::init(format!("{prefix}.v"), d_context, d_attn, false, rng, dtype, device)?,
            o: Linear::init(format!("{prefix}.o"), d_attn, d_query, true, rng, dtype, device)?,
            heads,
        })
    }

    /// Attention output projected back to the query width (no residual).
    pub fn attend(&self, query: &Tensor, context: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let q = self.q.forward(query)?;
        let k = self.k.forward(context)?;
        let v = self.v.forward(context)?;
        self.o.forward(&attention(&q, &k, &v, self.heads, bias)?)
    }
}

impl Module for Attention {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.collect(out);
        }
    }
}

/// Nearest-neighbour 2× upsampling built from broadcasts.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Deterministic sinusoidal embedding: `[sin(t w_0), cos(t w_0), sin(t w_1), ...]`
/// with `w_i = 10000^(-i / (dim/2))`.
pub fn sinusoidal(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return contract(format!("sinusoidal embedding needs an even dim, got {dim}"));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

/// Stacks per-item sinusoidal embeddings into a `(B, dim)` tensor.
pub fn timestep_embedding(
    timesteps: &[usize],
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        flat.extend(sinusoidal(t as f64, dim)?);
    }
    Ok(Tensor::from_vec(flat, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}
