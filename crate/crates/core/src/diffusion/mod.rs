//! Forward noising, the epsilon-prediction objective, the DDIM reverse
//! step, classifier-free guidance and the full sampling loop.

mod schedule;

pub use schedule::{inference_timesteps, NoiseSchedule};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{self, Rng};
use crate::text::TextEncoding;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return contract(format!(
            "{what}: shape {:?} does not match {:?}",
            a.dims(),
            b.dims()
        ));
    }
    Ok(())
}

/// Per-item scalar column `(B, 1, 1, ...)` matching the rank of `like`.
fn per_item(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut dims = vec![1usize; like.rank()];
    dims[0] = values.len();
    Ok(Tensor::from_vec(values.to_vec(), dims, like.device())?.to_dtype(like.dtype())?)
}

/// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` for one timestep.
pub fn forward_noise(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_noise")?;
    if t == 0 {
        return contract("forward_noise timestep must be in 1..=T");
    }
    forward_noise_at(x0, sched.alpha_bar(t)?, eps)
}

/// Closed-form marginal for an explicit `alpha_bar`.
pub fn forward_noise_at(x0: &Tensor, alpha_bar: f64, eps: &Tensor) -> Result<Tensor> {
    same_shape(x0, eps, "forward_noise")?;
    Ok(((x0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Batched form of [`forward_noise`] with one timestep per leading-axis item.
pub fn forward_noise_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape(x0, eps, "forward_noise")?;
    if x0.dims()[0] != ts.len() {
        return contract(format!(
            "forward_noise: {} timesteps for batch of {}",
            ts.len(),
            x0.dims()[0]
        ));
    }
    if ts.contains(&0) {
        return contract("forward_noise timestep must be in 1..=T");
    }
    let abs = ts
        .iter()
        .map(|&t| sched.alpha_bar(t))
        .collect::<Result<Vec<_>>>()?;
    let signal: Vec<f64> = abs.iter().map(|a| a.sqrt()).collect();
    let noise: Vec<f64> = abs.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok((x0.broadcast_mul(&per_item(&signal, x0)?)?
        + eps.broadcast_mul(&per_item(&noise, eps)?)?)?)
}

/// Mean squared error over all elements; differentiable in `eps_pred`.
pub fn ddpm_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape(eps_pred, eps, "ddpm_loss")?;
    Ok((eps_pred - eps)?.sqr()?.mean_all()?)
}

/// One DDIM update from `t` to `t_prev`.
///
/// `x0_hat = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`, then
/// `x_prev = sqrt(ab_prev) x0_hat + sqrt(1 - ab_prev - sigma^2) eps + sigma z`
/// with `sigma = eta sqrt((1 - ab_prev) / (1 - ab_t)) sqrt(1 - ab_t / ab_prev)`.
/// With `eta = 0` the step is deterministic and `rng` is untouched.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    same_shape(x_t, eps_pred, "ddim_step")?;
    if t_prev >= t {
        return contract(format!("ddim_step needs t_prev < t, got {t_prev} >= {t}"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return contract(format!("eta must lie in [0, 1], got {eta}"));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let x0_hat = ((x_t - (eps_pred * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mean = ((x0_hat * ab_prev.sqrt())? + (eps_pred * dir)?)?;
    if sigma == 0.0 {
        return Ok(mean);
    }
    let z = rng::randn(rng, x_t.shape().clone(), 1.0, x_t.dtype(), x_t.device())?;
    Ok((mean + (z * sigma)?)?)
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    same_shape(eps_uncond, eps_cond, "cfg_combine")?;
    // Exact endpoints: the affine form below rounds at s = 1.
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

/// A noise predictor conditioned on a (language-side) text encoding.
pub trait Denoise {
    /// `(channels, height, width)` of the images this model denoises.
    fn image_shape(&self) -> (usize, usize, usize);

    /// Embedding width the model accepts in [`TextEncoding`]s.
    fn text_dim(&self) -> usize;

    fn dtype(&self) -> DType;

    fn device(&self) -> &Device {
        &Device::Cpu
    }

    /// Predicts `eps` for a batch `x_t` of shape `(B, C, H, W)` at per-item
    /// timesteps `ts`.
    fn predict_eps(&self, x_t: &Tensor, ts: &[usize], text: &TextEncoding) -> Result<Tensor>;
}

/// Inference-time knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub num_inference_steps: usize,
    pub cfg_scale: f64,
    pub eta: f64,
    pub seed: u64,
    pub resolution: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            num_inference_steps: 50,
            cfg_scale: 7.5,
            eta: 0.0,
            seed: 0,
            resolution: 32,
        }
    }
}

/// Starting noise for a batch. Item `i` draws from a stream seeded with
/// `seeds[i]`, so an image does not depend on what else shares its batch.
pub fn initial_noise(
    seeds: &[u64],
    shape: (usize, usize, usize),
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (c, h, w) = shape;
    let per = c * h * w;
    let mut flat = Vec::with_capacity(seeds.len() * per);
    for &seed in seeds {
        flat.extend(rng::normal_vec(&mut rng::seeded(seed), per));
    }
    Ok(Tensor::from_vec(flat, (seeds.len(), c, h, w), device)?.to_dtype(dtype)?)
}

/// DDIM sampling with classifier-free guidance; item `i` starts from the
/// noise stream `cfg.seed ^ i`.
pub fn sample<M: Denoise + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cond: &TextEncoding,
    uncond: &TextEncoding,
    cfg: &SampleConfig,
) -> Result<Tensor> {
    let seeds: Vec<u64> = (0..cond.batch_size()? as u64).map(|i| cfg.seed ^ i).collect();
    sample_with_seeds(model, sched, cond, uncond, cfg, &seeds)
}

/// [`sample`] with explicit per-item noise seeds.
pub fn sample_with_seeds<M: Denoise + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    cond: &TextEncoding,
    uncond: &TextEncoding,
    cfg: &SampleConfig,
    seeds: &[u64],
) -> Result<Tensor> {
    let (c, h, w) = model.image_shape();
    if cfg.resolution != h || cfg.resolution != w {
        return contract(format!(
            "sample resolution {} does not match model resolution {h}x{w}",
            cfg.resolution
        ));
    }
    for enc in [cond, uncond] {
        if enc.dim()? != model.text_dim() {
            return contract(format!(
                "text encoding width {} does not match adapter input {}",
                enc.dim()?,
                model.text_dim()
            ));
        }
    }
    let batch = cond.batch_size()?;
    if seeds.len() != batch {
        return contract(format!("{} seeds for batch of {batch}", seeds.len()));
    }
    let uncond = uncond.expand_to(batch)?;
    let steps = inference_timesteps(sched.num_steps(), cfg.num_inference_steps)?;
    let mut noise_rng = rng::seeded(rng::derive_seed(cfg.seed, "ddim-eta"));
    let mut x = initial_noise(seeds, (c, h, w), model.dtype(), model.device())?;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let ts = vec![t; batch];
        let eps_c = model.predict_eps(&x, &ts, cond)?;
        let eps_u = model.predict_eps(&x, &ts, &uncond)?;
        let eps = cfg_combine(&eps_u, &eps_c, cfg.cfg_scale)?;
        x = ddim_step(&x, &eps, t, t_prev, sched, cfg.eta, &mut noise_rng)?;
    }
    Ok(x.clamp(-1.0, 1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        t.to_vec1::<f64>().unwrap()[0]
    }

    /// One-step schedule whose alpha_bar(1) is the given value.
    fn sched_with(ab: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - ab]).unwrap()
    }

    #[test]
    fn forward_noise_endpoints() {
        let x0 = scalar(0.7);
        let eps = scalar(-1.3);
        assert_eq!(val(&forward_noise(&x0, 1, &eps, &sched_with(1.0)).unwrap()), 0.7);
        assert_eq!(val(&forward_noise_at(&x0, 1.0, &eps).unwrap()), 0.7);
        assert_eq!(val(&forward_noise_at(&x0, 0.0, &eps).unwrap()), -1.3);
    }

    #[test]
    fn forward_noise_scalar_case() {
        let out = forward_noise(&scalar(1.0), 1, &scalar(1.0), &sched_with(0.25)).unwrap();
        assert!((val(&out) - 1.366_025_403_784_438_6).abs() < 1e-12);
    }

    #[test]
    fn forward_noise_rejects_mismatch() {
        let a = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        assert!(forward_noise(&a, 1, &b, &sched_with(0.5)).is_err());
    }

    #[test]
    fn loss_examples() {
        let eps = Tensor::new(&[0.3f64, -0.2, 1.1], &Device::Cpu).unwrap();
        let l0 = ddpm_loss(&eps, &eps).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l0, 0.0);
        let l1 = ddpm_loss(&(&eps + 1.0).unwrap(), &eps)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((l1 - 1.0).abs() < 1e-15);
        let pred = Tensor::new(&[0.0f64, 2.0], &Device::Cpu).unwrap();
        let target = Tensor::new(&[1.0f64, 0.0], &Device::Cpu).unwrap();
        assert_eq!(ddpm_loss(&pred, &target).unwrap().to_scalar::<f64>().unwrap(), 2.5);
    }

    #[test]
    fn ddim_scalar_case() {
        let s = NoiseSchedule::from_betas(vec![0.19, 1.0 - 0.25 / 0.81]).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.81).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.25).abs() < 1e-15);
        let mut rng = rng::seeded(0);
        let out = ddim_step(&scalar(1.0), &scalar(0.5), 2, 1, &s, 0.0, &mut rng).unwrap();
        assert!((val(&out) - 1.238_522_083_771_039).abs() < 1e-12, "{}", val(&out));
    }

    #[test]
    fn ddim_inverts_forward_noise() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = rng::seeded(1);
        let x0 = rng::randn(&mut rng, (2, 3, 4, 4), 0.5, DType::F64, &Device::Cpu).unwrap();
        let eps = rng::randn(&mut rng, (2, 3, 4, 4), 1.0, DType::F64, &Device::Cpu).unwrap();
        for t in [1, 10, 500, 1000] {
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let back = ddim_step(&xt, &eps, t, 0, &s, 0.0, &mut rng).unwrap();
            let a = back.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-6 * v.abs().max(1e-3), "t={t}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn ddim_fixed_point_when_alpha_bar_is_flat() {
        let s = NoiseSchedule::from_betas(vec![0.3, 0.0]).unwrap();
        let mut rng = rng::seeded(2);
        let x = rng::randn(&mut rng, 6, 1.0, DType::F64, &Device::Cpu).unwrap();
        let e = rng::randn(&mut rng, 6, 1.0, DType::F64, &Device::Cpu).unwrap();
        let out = ddim_step(&x, &e, 2, 1, &s, 0.0, &mut rng).unwrap();
        for (u, v) in out.to_vec1::<f64>().unwrap().iter().zip(x.to_vec1::<f64>().unwrap()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_rejects_non_decreasing_step() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let mut rng = rng::seeded(0);
        assert!(ddim_step(&scalar(0.0), &scalar(0.0), 3, 3, &s, 0.0, &mut rng).is_err());
        assert!(ddim_step(&scalar(0.0), &scalar(0.0), 3, 5, &s, 0.0, &mut rng).is_err());
    }

    #[test]
    fn ddim_eta_zero_is_pure() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let mut r = rng::seeded(3);
        let x = rng::randn(&mut r, 8, 1.0, DType::F64, &Device::Cpu).unwrap();
        let e = rng::randn(&mut r, 8, 1.0, DType::F64, &Device::Cpu).unwrap();
        let a = ddim_step(&x, &e, 50, 30, &s, 0.0, &mut rng::seeded(10)).unwrap();
        let b = ddim_step(&x, &e, 50, 30, &s, 0.0, &mut rng::seeded(99)).unwrap();
        assert_eq!(a.to_vec1::<f64>().unwrap(), b.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn cfg_examples() {
        let u = scalar(0.2);
        let c = scalar(0.4);
        assert_eq!(val(&cfg_combine(&u, &c, 1.0).unwrap()), 0.4);
        assert_eq!(val(&cfg_combine(&u, &c, 0.0).unwrap()), 0.2);
        assert!((val(&cfg_combine(&u, &c, 7.5).unwrap()) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn cfg_is_affine_in_scale() {
        let mut r = rng::seeded(4);
        let u = rng::randn(&mut r, 16, 1.0, DType::F64, &Device::Cpu).unwrap();
        let c = rng::randn(&mut r, 16, 1.0, DType::F64, &Device::Cpu).unwrap();
        for (a, b) in [(0.5, 2.0), (7.5, 1.25), (3.0, 3.0)] {
            let lhs = ((cfg_combine(&u, &c, a).unwrap() + cfg_combine(&u, &c, b).unwrap())
                .unwrap()
                - cfg_combine(&u, &c, 0.0).unwrap())
            .unwrap();
            let rhs = cfg_combine(&u, &c, a + b).unwrap();
            for (x, y) in lhs.to_vec1::<f64>().unwrap().iter().zip(rhs.to_vec1::<f64>().unwrap()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_noise_marginals() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let t = 300;
        let ab = s.alpha_bar(t).unwrap();
        let n = 20_000;
        let x0 = Tensor::full(0.8f64, n, &Device::Cpu).unwrap();
        let eps = rng::randn(&mut rng::seeded(11), n, 1.0, DType::F64, &Device::Cpu).unwrap();
        let xt = forward_noise(&x0, t, &eps, &s).unwrap().to_vec1::<f64>().unwrap();
        let mean = xt.iter().sum::<f64>() / n as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want_mean = ab.sqrt() * 0.8;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        // Var of the sample variance of a Gaussian is 2 sigma^4 / (n - 1).
        let se_var = (2.0 * want_var * want_var / (n - 1) as f64).sqrt();
        assert!((mean - want_mean).abs() < 3.0 * se_mean, "{mean} vs {want_mean}");
        assert!((var - want_var).abs() < 3.0 * se_var, "{var} vs {want_var}");
    }
}
