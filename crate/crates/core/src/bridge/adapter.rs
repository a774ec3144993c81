use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::lora::linear_forward;
use crate::error::{contract, Result};
use crate::rng::{self, Rng};
use crate::text::TextEncoding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    /// Test hook only; collapses the two layers into one affine map.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// `fc2(act(fc1(c)))`.
    TwoLayer,
    /// A single `d_in -> d_out` linear map (ablation).
    Linear,
}

/// Shape of the feedforward map between text rows and cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterSpec {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub kind: AdapterKind,
    pub activation: Activation,
}

impl AdapterSpec {
    /// Two-layer GELU adapter with `d_hidden = max(d_in, d_out)`.
    pub fn new(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_hidden: d_in.max(d_out),
            d_out,
            kind: AdapterKind::TwoLayer,
            activation: Activation::Gelu,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            AdapterKind::TwoLayer => {
                self.d_in * self.d_hidden + self.d_hidden + self.d_hidden * self.d_out + self.d_out
            }
            AdapterKind::Linear => self.d_in * self.d_out + self.d_out,
        }
    }
}

/// Trainable adapter `h`. Weights are stored `d_out x d_in`.
#[derive(Debug)]
pub struct Adapter {
    spec: AdapterSpec,
    params: Vec<(String, Var)>,
}

impl Adapter {
    pub fn init(spec: AdapterSpec, rng: &mut Rng, dtype: DType, device: &Device) -> Result<Self> {
        if spec.d_in == 0 || spec.d_out == 0 || spec.d_hidden == 0 {
            return contract("adapter dimensions must be positive");
        }
        let mut layer = |name: &str, d_in: usize, d_out: usize| -> Result<Vec<(String, Var)>> {
            let bound = 1.0 / (d_in as f64).sqrt();
            Ok(vec![
                (
                    format!("adapter.{name}.weight"),
                    Var::from_tensor(&rng::uniform(rng, (d_out, d_in), bound, dtype, device)?)?,
                ),
                (
                    format!("adapter.{name}.bias"),
                    Var::from_tensor(&Tensor::zeros(d_out, dtype, device)?)?,
                ),
            ])
        };
        let params = match spec.kind {
            AdapterKind::TwoLayer => {
                let mut p = layer("fc1", spec.d_in, spec.d_hidden)?;
                p.extend(layer("fc2", spec.d_hidden, spec.d_out)?);
                p
            }
            AdapterKind::Linear => layer("fc", spec.d_in, spec.d_out)?,
        };
        Ok(Self { spec, params })
    }

    /// Builds a two-layer adapter from explicit `d_in x d_hidden` and
    /// `d_hidden x d_out` matrices (row-vector convention).
    pub fn from_matrices(
        activation: Activation,
        w1: &Tensor,
        b1: &Tensor,
        w2: &Tensor,
        b2: &Tensor,
    ) -> Result<Self> {
        let (d_in, d_hidden) = w1.dims2()?;
        let (h2, d_out) = w2.dims2()?;
        if h2 != d_hidden || b1.dims1()? != d_hidden || b2.dims1()? != d_out {
            return contract("adapter matrices have inconsistent shapes");
        }
        let var = |t: &Tensor| Var::from_tensor(t);
        Ok(Self {
            spec: AdapterSpec {
                d_in,
                d_hidden,
                d_out,
                kind: AdapterKind::TwoLayer,
                activation,
            },
            params: vec![
                ("adapter.fc1.weight".into(), var(&w1.t()?.contiguous()?)?),
                ("adapter.fc1.bias".into(), var(b1)?),
                ("adapter.fc2.weight".into(), var(&w2.t()?.contiguous()?)?),
                ("adapter.fc2.bias".into(), var(b2)?),
            ],
        })
    }

    pub fn spec(&self) -> &AdapterSpec {
        &self.spec
    }

    /// Trainable tensors in fixed order.
    pub fn parameters(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Applies `h` row-wise to `(B, L, d_in)` rows; the mask passes through.
    pub fn adapt(&self, c: &TextEncoding) -> Result<TextEncoding> {
        Ok(TextEncoding {
            embeddings: self.forward(&c.embeddings)?,
            mask: c.mask.clone(),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = *x.dims().last().unwrap_or(&0);
        if d != self.spec.d_in {
            return contract(format!("adapter expects width {} but got {d}", self.spec.d_in));
        }
        let p = |i: usize| self.params[i].1.as_tensor();
        match self.spec.kind {
            AdapterKind::Linear => linear_forward(p(0), Some(p(1)), x),
            AdapterKind::TwoLayer => {
                let h = linear_forward(p(0), Some(p(1)), x)?;
                let h = match self.spec.activation {
                    Activation::Gelu => h.gelu()?,
                    Activation::Identity => h,
                };
                linear_forward(p(2), Some(p(3)), &h)
            }
        }
    }
}
