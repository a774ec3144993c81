//! Assembling models, runs and evaluation sets from a [`RunConfig`].

use candle_core::{DType, Device, Tensor};

use crate::bridge::{inject, AdapterSpec, BridgedModel, LoraConfig};
use crate::config::RunConfig;
use crate::denoiser::Denoiser;
use crate::diffusion::{sample_with_seeds, Denoise, NoiseSchedule, SampleConfig};
use crate::error::{contract, Error, Result};
use crate::eval::{alignment_score, features, frechet_distance, AlignmentReport, MIN_RESOLUTION};
use crate::rng;
use crate::text::{TextEncoder, TextEncoderConfig};
use crate::train::checkpoint::{self, CheckpointRecord};
use crate::train::scene::{generate_pair, generate_single, render, SceneSpec};
use crate::train::{load_trainable, Trainer};

/// Builds the frozen backbones from their seeds and injects the bridge.
pub fn build_model(cfg: &RunConfig) -> Result<BridgedModel> {
    build_model_with(cfg, DType::F32)
}

pub fn build_model_with(cfg: &RunConfig, dtype: DType) -> Result<BridgedModel> {
    let cfg = cfg.clone().resolved()?;
    let dev = Device::Cpu;
    let lcfg = TextEncoderConfig::preset(&cfg.language.preset, cfg.language.arch, cfg.language.max_len)?;
    let lm = TextEncoder::new(lcfg, cfg.language.seed, dtype, &dev)?;
    let vision = Denoiser::new(cfg.vision_config()?, cfg.vision.seed, dtype, &dev)?;
    let b = &cfg.bridge;
    let alpha = b.alpha.expect("resolved");
    let lora = |on: bool, patterns: &Option<Vec<String>>| {
        on.then(|| LoraConfig {
            rank: b.rank,
            alpha,
            target_patterns: patterns.clone().expect("resolved"),
        })
    };
    let spec = AdapterSpec {
        d_in: lm.embed_dim(),
        d_hidden: b.adapter_hidden.expect("resolved"),
        d_out: vision.cross_dim(),
        kind: b.adapter,
        activation: crate::bridge::Activation::Gelu,
    };
    inject(
        lm,
        vision,
        lora(b.language_lora, &b.language_patterns),
        lora(b.vision_lora, &b.vision_patterns),
        spec,
        b.seed,
    )
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    let s = &cfg.schedule;
    NoiseSchedule::linear(s.num_steps, s.beta_start, s.beta_end)
}

pub fn new_trainer(cfg: &RunConfig) -> Result<Trainer> {
    Trainer::new(build_model(cfg)?, schedule(cfg)?, cfg.train.clone())
}

/// Rebuilds a run from a checkpoint; the embedded config is authoritative.
pub fn resume_trainer(rec: &CheckpointRecord) -> Result<(RunConfig, Trainer)> {
    let cfg = RunConfig::from_toml(&rec.config_toml)?;
    let mut trainer = new_trainer(&cfg)?;
    trainer.restore(rec)?;
    Ok((cfg, trainer))
}

/// Loads a checkpoint into a freshly built model for inference.
pub fn load_model(path: &std::path::Path) -> Result<(RunConfig, BridgedModel)> {
    let rec = checkpoint::load(path)?;
    let cfg = RunConfig::from_toml(&rec.config_toml)?;
    let model = build_model(&cfg)?;
    load_trainable(&model, &rec.tensors)?;
    Ok((cfg, model))
}

/// Generates one image per prompt. Prompt `i` starts from the noise stream
/// `cfg.seed ^ i`, so chunking never changes any image. The unconditional
/// branch uses the empty prompt.
pub fn sample_prompts<S: AsRef<str>>(
    model: &BridgedModel,
    sched: &NoiseSchedule,
    prompts: &[S],
    cfg: &SampleConfig,
    chunk: usize,
) -> Result<Vec<Vec<f32>>> {
    if chunk == 0 {
        return contract("chunk size must be positive");
    }
    let uncond = model.lm().null_encoding()?;
    let mut out = Vec::with_capacity(prompts.len());
    for (c, group) in prompts.chunks(chunk).enumerate() {
        let cond = model.encode_prompts(group)?;
        let seeds: Vec<u64> = (0..group.len())
            .map(|j| cfg.seed ^ (c * chunk + j) as u64)
            .collect();
        let images = sample_with_seeds(model, sched, &cond, &uncond, cfg, &seeds)?;
        out.extend(split_images(&images)?);
    }
    Ok(out)
}

/// `(B, 3, R, R)` to `B` flat channel-major `f32` buffers.
pub fn split_images(images: &Tensor) -> Result<Vec<Vec<f32>>> {
    let b = images.dims4()?.0;
    (0..b)
        .map(|i| Ok(images.get(i)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?))
        .collect()
}

/// Held-out scenes: `n_single` one-object then `n_pair` two-object specs,
/// drawn from streams disjoint from training data.
pub fn eval_scenes(cfg: &RunConfig) -> Vec<SceneSpec> {
    let mut singles = rng::seeded(rng::derive_seed(cfg.eval.seed, "eval/single"));
    let mut pairs = rng::seeded(rng::derive_seed(cfg.eval.seed, "eval/pair"));
    let mut out: Vec<SceneSpec> = (0..cfg.eval.n_single).map(|_| generate_single(&mut singles)).collect();
    out.extend((0..cfg.eval.n_pair).map(|_| generate_pair(&mut pairs)));
    out
}

/// Alignment report over `(prompt, image)` pairs plus the Fréchet distance
/// between their features and those of `reference` images.
pub fn evaluate(
    samples: &[(String, Vec<f32>)],
    reference: &[Vec<f32>],
    resolution: usize,
    eps: f64,
) -> Result<(AlignmentReport, Option<f64>)> {
    if resolution < MIN_RESOLUTION {
        return contract(format!(
            "alignment scoring needs resolution >= {MIN_RESOLUTION}, got {resolution}"
        ));
    }
    let report = alignment_score(
        samples.iter().map(|(p, i)| (p.as_str(), i.as_slice())),
        resolution,
    );
    let frechet = if samples.len() >= 2 && reference.len() >= 2 {
        let a: Vec<Vec<f64>> = samples.iter().map(|(_, i)| features(i, resolution)).collect();
        let b: Vec<Vec<f64>> = reference.iter().map(|i| features(i, resolution)).collect();
        Some(frechet_distance(&a, &b, eps)?)
    } else {
        None
    };
    Ok((report, frechet))
}

/// Samples the held-out prompts with `model` and scores them.
pub fn evaluate_model(
    model: &BridgedModel,
    cfg: &RunConfig,
) -> Result<(AlignmentReport, Option<f64>)> {
    let sched = schedule(cfg)?;
    let scenes = eval_scenes(cfg);
    let prompts: Vec<String> = scenes.iter().map(SceneSpec::caption).collect();
    let images = sample_prompts(model, &sched, &prompts, &cfg.sample, 16)?;
    let res = model.image_shape().1;
    let reference: Vec<Vec<f32>> = scenes.iter().map(|s| render(s, res)).collect();
    let samples: Vec<(String, Vec<f32>)> = prompts.into_iter().zip(images).collect();
    evaluate(&samples, &reference, res, cfg.eval.frechet_eps)
}

/// Parameter counts followed by the injection-site table.
pub fn params_report(model: &BridgedModel) -> String {
    format!("{}\n[sites]\n{}", model.count_parameters(), model.site_report())
}

/// Raises on NaN or infinity in `t`.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("{what} contains non-finite values")));
    }
    Ok(())
}
