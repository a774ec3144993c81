//! Scene data, the training step, AdamW and checkpoints.

pub mod checkpoint;
mod optim;
pub mod scene;

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use candle_core::{Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::CheckpointRecord;
pub use optim::{AdamW, AdamWConfig};
pub use scene::{generate_scene, render, SceneSpec};

use crate::bridge::BridgedModel;
use crate::diffusion::{ddpm_loss, forward_noise_batch, Denoise, NoiseSchedule};
use crate::error::{config, Error, Result};
use crate::rng::{self, Rng, RngState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub snapshot_every: u64,
    pub resolution: usize,
    /// Probability that an item's caption is replaced by the empty prompt.
    pub p_uncond: f64,
    /// Prefetched batches held by the data producer.
    pub queue_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            snapshot_every: 1_000,
            resolution: 32,
            p_uncond: 0.1,
            queue_depth: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.snapshot_every == 0 || self.queue_depth == 0 {
            return config("train.steps, batch_size, snapshot_every and queue_depth must be positive");
        }
        if self.steps % self.snapshot_every != 0 {
            return config(format!(
                "train.snapshot_every ({}) must divide train.steps ({})",
                self.snapshot_every, self.steps
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return config("train.learning_rate must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return config("train.p_uncond must lie in [0, 1]");
        }
        if self.resolution < 8 {
            return config("train.resolution must be at least 8");
        }
        Ok(())
    }
}

/// Rendered images `(B, 3, R, R)` with their captions and specs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub captions: Vec<String>,
    pub specs: Vec<SceneSpec>,
}

/// Seed of the item stream a run with `train.seed = seed` consumes.
pub fn data_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, "train/data")
}

/// Scene for dataset item `index`; depends on nothing else.
pub fn scene_at(data_seed: u64, index: u64) -> (SceneSpec, String) {
    let mut r = rng::seeded(rng::derive_seed(data_seed, &format!("item/{index}")));
    generate_scene(&mut r)
}

/// Items `start .. start + count` rendered at `resolution`.
pub fn make_batch(data_seed: u64, start: u64, count: usize, resolution: usize) -> Result<Batch> {
    let mut pixels = Vec::with_capacity(count * 3 * resolution * resolution);
    let mut captions = Vec::with_capacity(count);
    let mut specs = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let (spec, caption) = scene_at(data_seed, start + i);
        pixels.extend(render(&spec, resolution));
        captions.push(caption);
        specs.push(spec);
    }
    Ok(Batch {
        images: Tensor::from_vec(pixels, (count, 3, resolution, resolution), &Device::Cpu)?,
        captions,
        specs,
    })
}

/// Background producer of consecutive batches through a bounded queue.
/// Batch `k` always holds items `k B .. (k + 1) B`, whatever the timing.
pub struct DataStream {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl DataStream {
    pub fn spawn(
        data_seed: u64,
        first_batch: u64,
        batch_size: usize,
        resolution: usize,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth);
        let handle = std::thread::spawn(move || {
            let mut k = first_batch;
            loop {
                let batch = make_batch(data_seed, k * batch_size as u64, batch_size, resolution);
                if tx.send(batch).is_err() {
                    return;
                }
                k += 1;
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        self.rx
            .recv()
            .map_err(|_| Error::Contract("data producer stopped".into()))?
    }
}

impl Drop for DataStream {
    fn drop(&mut self) {
        // Unblock a producer waiting on a full queue, then reap it.
        while self.rx.try_recv().is_ok() {}
        let rx = std::mem::replace(&mut self.rx, sync_channel(1).1);
        drop(rx);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// What one optimisation step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub unconditional: usize,
}

/// Draws per-item `t`, CFG dropout flags and noise from `rng` (in that
/// order), computes the DDPM loss and applies one AdamW update.
pub fn train_step(
    model: &BridgedModel,
    batch: &Batch,
    sched: &NoiseSchedule,
    opt: &mut AdamW,
    rng: &mut Rng,
    p_uncond: f64,
    step: u64,
) -> Result<StepOutput> {
    let b = batch.captions.len();
    let dtype = model.dtype();
    let x0 = batch.images.to_dtype(dtype)?;
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.num_steps())).collect();
    let drop: Vec<bool> = (0..b).map(|_| rng.random_bool(p_uncond)).collect();
    let eps = rng::randn(rng, x0.shape().clone(), 1.0, dtype, x0.device())?;
    let captions: Vec<&str> = batch
        .captions
        .iter()
        .zip(&drop)
        .map(|(c, &d)| if d { "" } else { c.as_str() })
        .collect();

    let text = model.encode_prompts(&captions)?;
    let x_t = forward_noise_batch(&x0, &ts, &eps, sched)?;
    let pred = model.predict_eps(&x_t, &ts, &text)?;
    let loss = ddpm_loss(&pred, &eps)?;
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("loss = {value}"),
        });
    }
    let grads = loss.backward()?;
    opt.step(&grads)?;
    Ok(StepOutput {
        loss: value,
        unconditional: drop.iter().filter(|&&d| d).count(),
    })
}

/// A training run: model, optimizer, step RNG and data position.
pub struct Trainer {
    pub model: BridgedModel,
    pub sched: NoiseSchedule,
    pub cfg: TrainConfig,
    pub opt: AdamW,
    pub rng: Rng,
    /// Completed steps.
    pub step: u64,
    stream: Option<DataStream>,
}

impl Trainer {
    pub fn new(model: BridgedModel, sched: NoiseSchedule, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model.trainable_parameters().into_iter().map(|(_, v)| v).collect();
        let opt = AdamW::new(params, AdamWConfig::new(cfg.learning_rate, cfg.weight_decay))?;
        let rng = rng::seeded(rng::derive_seed(cfg.seed, "train/steps"));
        Ok(Self {
            model,
            sched,
            cfg,
            opt,
            rng,
            step: 0,
            stream: None,
        })
    }

    fn data_seed(&self) -> u64 {
        data_seed(self.cfg.seed)
    }

    /// Runs one step on the next batch in item order.
    pub fn step_once(&mut self) -> Result<StepOutput> {
        if self.stream.is_none() {
            self.stream = Some(DataStream::spawn(
                self.data_seed(),
                self.step,
                self.cfg.batch_size,
                self.cfg.resolution,
                self.cfg.queue_depth,
            ));
        }
        let batch = self.stream.as_mut().expect("stream started").next_batch()?;
        let out = train_step(
            &self.model,
            &batch,
            &self.sched,
            &mut self.opt,
            &mut self.rng,
            self.cfg.p_uncond,
            self.step,
        )?;
        self.step += 1;
        Ok(out)
    }

    /// Everything needed to continue this run bit-exactly.
    pub fn checkpoint(&self, config_toml: &str) -> CheckpointRecord {
        CheckpointRecord {
            config_toml: config_toml.to_string(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            tensors: self
                .model
                .trainable_parameters()
                .into_iter()
                .map(|(n, v)| (n, v.as_tensor().clone()))
                .collect(),
            adam_t: self.opt.t,
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }

    /// Loads trainable tensors, optimizer state, RNG and step counter.
    /// `self.model` must have been built from the same config.
    pub fn restore(&mut self, rec: &CheckpointRecord) -> Result<()> {
        load_trainable(&self.model, &rec.tensors)?;
        self.opt.restore(rec.adam_t, rec.adam_m.clone(), rec.adam_v.clone())?;
        self.rng = rec.rng.restore();
        self.step = rec.step;
        self.stream = None;
        Ok(())
    }
}

/// Copies named tensors into the model's trainable parameters. Names,
/// order and shapes must match exactly.
pub fn load_trainable(model: &BridgedModel, tensors: &[(String, Tensor)]) -> Result<()> {
    let params = model.trainable_parameters();
    if params.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} trainable tensors, model has {}",
            tensors.len(),
            params.len()
        )));
    }
    for ((name, var), (stored, t)) in params.iter().zip(tensors) {
        if name != stored || var.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor {stored} {:?} does not match model tensor {name} {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}
