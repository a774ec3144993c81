//! Low-rank deltas for frozen linear and convolutional layers.
//!
//! A wrapped layer computes `base(x) + (alpha / r) * B(A(x))`. `B` starts at
//! exactly zero so a freshly injected delta contributes nothing.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{self, Rng};

/// Rank, scale and the layer-name globs a delta is attached to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub target_patterns: Vec<String>,
}

impl LoraConfig {
    /// `alpha` defaults to the rank, giving a net scale of 1.
    pub fn new(rank: usize, target_patterns: Vec<String>) -> Self {
        Self {
            rank,
            alpha: rank as f64,
            target_patterns,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Shape of the frozen layer a delta wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeltaKind {
    Linear { d_in: usize, d_out: usize },
    Conv { c_in: usize, c_out: usize, kernel: usize },
}

impl DeltaKind {
    /// Closed-form trainable size at rank `r`.
    pub fn param_count(&self, r: usize) -> usize {
        match *self {
            DeltaKind::Linear { d_in, d_out } => r * (d_in + d_out),
            DeltaKind::Conv {
                c_in,
                c_out,
                kernel,
            } => r * (c_in * kernel * kernel + c_out),
        }
    }
}

/// Trainable pair `(A, B)`.
///
/// Linear: `A` is `r x d_in`, `B` is `d_out x r`.
/// Conv: `A` is `r x c_in x k x k` (a k×k conv into r channels) and `B` is
/// `c_out x r x 1 x 1` (a 1×1 conv back out).
#[derive(Debug, Clone)]
pub struct LoraDelta {
    pub a: Var,
    pub b: Var,
    pub rank: usize,
    pub alpha: f64,
    pub kind: DeltaKind,
}

impl LoraDelta {
    pub fn init(
        kind: DeltaKind,
        rank: usize,
        alpha: f64,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if rank == 0 {
            return contract("LoRA rank must be at least 1");
        }
        let (a, b) = match kind {
            DeltaKind::Linear { d_in, d_out } => {
                let std = 1.0 / (d_in as f64).sqrt();
                (
                    rng::randn(rng, (rank, d_in), std, dtype, device)?,
                    Tensor::zeros((d_out, rank), dtype, device)?,
                )
            }
            DeltaKind::Conv {
                c_in,
                c_out,
                kernel,
            } => {
                let std = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
                (
                    rng::randn(rng, (rank, c_in, kernel, kernel), std, dtype, device)?,
                    Tensor::zeros((c_out, rank, 1, 1), dtype, device)?,
                )
            }
        };
        Ok(Self {
            a: Var::from_tensor(&a)?,
            b: Var::from_tensor(&b)?,
            rank,
            alpha,
            kind,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.elem_count() + self.b.elem_count()
    }

    /// The dense update `(alpha/r) * B A` with the base weight's shape.
    pub fn merged_update(&self) -> Result<Tensor> {
        let a = self.a.as_tensor();
        let b = self.b.as_tensor();
        let update = match self.kind {
            DeltaKind::Linear { .. } => b.matmul(a)?,
            DeltaKind::Conv {
                c_in,
                c_out,
                kernel,
            } => b
                .reshape((c_out, self.rank))?
                .matmul(&a.reshape((self.rank, c_in * kernel * kernel))?)?
                .reshape((c_out, c_in, kernel, kernel))?,
        };
        Ok((update * self.scale())?)
    }
}

/// `x W^T + b` over the last axis of `x`.
pub fn linear_forward(weight: &Tensor, bias: Option<&Tensor>, x: &Tensor) -> Result<Tensor> {
    let (d_out, d_in) = weight.dims2()?;
    let dims = x.dims();
    if dims.last() != Some(&d_in) {
        return contract(format!(
            "linear expects trailing dim {d_in}, got shape {dims:?}"
        ));
    }
    let rows = x.elem_count() / d_in;
    let mut out_dims = dims.to_vec();
    *out_dims.last_mut().unwrap() = d_out;
    let y = x.reshape((rows, d_in))?.matmul(&weight.t()?)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    Ok(y.reshape(out_dims)?)
}

/// `y = W x + b + (alpha/r) * B (A x)`.
pub fn lora_linear_forward(
    weight: &Tensor,
    bias: Option<&Tensor>,
    delta: Option<&LoraDelta>,
    x: &Tensor,
) -> Result<Tensor> {
    let base = linear_forward(weight, bias, x)?;
    let Some(delta) = delta else {
        return Ok(base);
    };
    let (d_out, d_in) = weight.dims2()?;
    if delta.kind != (DeltaKind::Linear { d_in, d_out }) {
        return contract(format!(
            "LoRA delta {:?} does not fit a {d_in}->{d_out} linear layer",
            delta.kind
        ));
    }
    let down = linear_forward(delta.a.as_tensor(), None, x)?;
    let up = linear_forward(delta.b.as_tensor(), None, &down)?;
    Ok((base + (up * delta.scale())?)?)
}

/// Convolution geometry shared by a base conv and its delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

pub fn conv_forward(
    weight: &Tensor,
    bias: Option<&Tensor>,
    geometry: ConvGeometry,
    x: &Tensor,
) -> Result<Tensor> {
    let (_, c_in, _, _) = weight.dims4()?;
    let (_, x_c, _, _) = x.dims4()?;
    if x_c != c_in {
        return contract(format!("conv expects {c_in} input channels, got {x_c}"));
    }
    let y = x.conv2d(weight, geometry.padding, geometry.stride, 1, 1)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, b.elem_count(), 1, 1))?)?,
        None => y,
    })
}

/// Base conv plus a k×k conv into `r` channels followed by a 1×1 conv out,
/// scaled by `alpha/r`.
pub fn lora_conv_forward(
    weight: &Tensor,
    bias: Option<&Tensor>,
    geometry: ConvGeometry,
    delta: Option<&LoraDelta>,
    x: &Tensor,
) -> Result<Tensor> {
    // The frozen kernel enters the graph through a zero-copy view, so
    // backward never keys a kernel partial to the base tensor itself.
    let frozen = weight.broadcast_as(weight.shape())?;
    let base = conv_forward(&frozen, bias, geometry, x)?;
    let Some(delta) = delta else {
        return Ok(base);
    };
    let (c_out, c_in, kernel, _) = weight.dims4()?;
    if delta.kind
        != (DeltaKind::Conv {
            c_in,
            c_out,
            kernel,
        })
    {
        return contract(format!(
            "LoRA delta {:?} does not fit a {c_in}->{c_out} k={kernel} conv",
            delta.kind
        ));
    }
    let down = conv_forward(delta.a.as_tensor(), None, geometry, x)?;
    let up = conv_forward(
        delta.b.as_tensor(),
        None,
        ConvGeometry {
            stride: 1,
            padding: 0,
        },
        &down,
    )?;
    Ok((base + (up * delta.scale())?)?)
}
