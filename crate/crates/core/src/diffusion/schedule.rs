use crate::error::{Error, Result};

/// Precomputed `beta`, `alpha = 1 - beta` and cumulative `alpha_bar`
/// tables. Timesteps are 1-based: `t` ranges over `1..=T`, and
/// `alpha_bar(0)` is defined as 1 (clean data).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas evenly spaced from `beta_start` to `beta_end` over `num_steps`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Schedule("num_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&beta_start)
            || !(0.0..1.0).contains(&beta_end)
            || beta_start > beta_end
        {
            return Err(Error::Schedule(format!(
                "need 0 <= beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta table".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(Error::Schedule(format!("beta {b} outside [0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar` at 1-based timestep `t`; `t = 0` gives 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.num_steps() => Ok(self.alpha_bars[t - 1]),
            t => Err(Error::Contract(format!(
                "timestep {t} outside 0..={}",
                self.num_steps()
            ))),
        }
    }
}

/// Strictly decreasing uniform-stride subsequence `T, T - s, ..., s` with
/// `s = T / n`.
pub fn inference_timesteps(num_steps: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > num_steps || num_steps % n != 0 {
        return Err(Error::Contract(format!(
            "{n} inference steps must evenly divide {num_steps} training steps"
        )));
    }
    let stride = num_steps / n;
    Ok((0..n).map(|i| num_steps - i * stride).collect())
}
