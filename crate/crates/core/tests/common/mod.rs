#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use tinybridge::bridge::{
    default_language_patterns, default_vision_patterns, inject, AdapterKind, AdapterSpec,
    BridgedModel, LoraConfig,
};
use tinybridge::denoiser::{Denoiser, DenoiserConfig, DenoiserKind};
use tinybridge::diffusion::NoiseSchedule;
use tinybridge::text::{ArchKind, TextEncoder, TextEncoderConfig};
use tinybridge::train::{TrainConfig, Trainer};

pub const TINY_RES: usize = 8;

/// Width-8 encoder of the `lm-small` depth.
pub fn tiny_lm(dtype: DType) -> TextEncoder {
    let mut cfg = TextEncoderConfig::preset("lm-small", ArchKind::EncoderOnly, 8).unwrap();
    cfg.embed_dim = 8;
    cfg.num_heads = 2;
    TextEncoder::new(cfg, 1, dtype, &Device::Cpu).unwrap()
}

pub fn tiny_dit_config() -> DenoiserConfig {
    DenoiserConfig {
        kind: DenoiserKind::Dit,
        base_channels: 16,
        channel_multipliers: Vec::new(),
        depth: 2,
        cross_dim: 8,
        num_heads: 2,
        patch_size: 2,
        in_channels: 3,
        resolution: TINY_RES,
    }
}

pub struct Tiny {
    pub vision: DenoiserConfig,
    pub language_lora: bool,
    pub vision_lora: bool,
    pub adapter: AdapterKind,
}

impl Default for Tiny {
    fn default() -> Self {
        Self {
            vision: DenoiserConfig::tiny_unet(),
            language_lora: true,
            vision_lora: true,
            adapter: AdapterKind::TwoLayer,
        }
    }
}

impl Tiny {
    pub fn build(&self, dtype: DType) -> BridgedModel {
        let lm = tiny_lm(dtype);
        let vision = Denoiser::new(self.vision.clone(), 2, dtype, &Device::Cpu).unwrap();
        let vp = default_vision_patterns(&vision);
        let mut spec = AdapterSpec::new(8, self.vision.cross_dim);
        spec.kind = self.adapter;
        inject(
            lm,
            vision,
            self.language_lora
                .then(|| LoraConfig::new(2, default_language_patterns())),
            self.vision_lora.then(|| LoraConfig::new(2, vp)),
            spec,
            3,
        )
        .unwrap()
    }
}

pub fn tiny_model(dtype: DType) -> BridgedModel {
    Tiny::default().build(dtype)
}

pub fn short_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

pub fn tiny_train_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 4,
        seed,
        snapshot_every: steps,
        resolution: TINY_RES,
        ..TrainConfig::default()
    }
}

pub fn tiny_trainer(steps: u64, seed: u64) -> Trainer {
    Trainer::new(tiny_model(DType::F32), short_schedule(), tiny_train_config(steps, seed)).unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .into_iter()
        .map(f32::to_bits)
        .collect()
}
