use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
/// Moments are plain tensors so a checkpoint can carry them.
#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    params: Vec<Var>,
    /// Number of completed steps.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: Vec<Var>, cfg: AdamWConfig) -> Result<Self> {
        let m = params
            .iter()
            .map(|p| p.zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            cfg,
            params,
            t: 0,
            m,
            v,
        })
    }

    /// Replaces moments and step count, e.g. from a checkpoint.
    pub fn restore(&mut self, t: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return contract("optimizer state does not match parameter list");
        }
        for ((p, m), v) in self.params.iter().zip(&m).zip(&v) {
            if p.dims() != m.dims() || p.dims() != v.dims() {
                return contract("optimizer moment shape does not match its parameter");
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update. Parameters without a gradient keep their value but still
    /// decay and see their moments decay.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powf(self.t as f64);
        let bc2 = 1.0 - c.beta2.powf(self.t as f64);
        for (i, p) in self.params.iter().enumerate() {
            // Detached so the moments never hold on to this step's graph.
            let g = match grads.get(p.as_tensor()) {
                Some(g) => g.detach(),
                None => p.zeros_like()?,
            };
            let m = ((&self.m[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = (p.as_tensor() * (1.0 - c.learning_rate * c.weight_decay))?;
            p.set(&(decayed - (update * c.learning_rate)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}
