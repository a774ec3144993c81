//! Run configuration: a TOML file with strict keys, environment overrides
//! named `TINYBRIDGE__SECTION__KEY`, and a fully resolved echo.

use serde::{Deserialize, Serialize};

use crate::bridge::AdapterKind;
use crate::denoiser::{DenoiserConfig, DenoiserKind};
use crate::diffusion::SampleConfig;
use crate::error::{config, Error, Result};
use crate::eval::FrechetConfig;
use crate::text::ArchKind;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "TINYBRIDGE__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageSection {
    /// `lm-small`, `lm-base` or `lm-large`.
    pub preset: String,
    pub arch: ArchKind,
    pub max_len: usize,
    /// Seed of the frozen weights.
    pub seed: u64,
}

impl Default for LanguageSection {
    fn default() -> Self {
        Self {
            preset: "lm-base".into(),
            arch: ArchKind::EncoderOnly,
            max_len: 16,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionSection {
    /// `unet-small`, `unet-base` or `dit-base`.
    pub preset: String,
    /// Seed of the frozen weights.
    pub seed: u64,
}

impl Default for VisionSection {
    fn default() -> Self {
        Self {
            preset: "unet-base".into(),
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeSection {
    pub rank: usize,
    /// Defaults to `rank`.
    pub alpha: Option<f64>,
    pub language_lora: bool,
    pub vision_lora: bool,
    /// Defaults to every language self-attention projection.
    pub language_patterns: Option<Vec<String>>,
    /// Defaults depend on the vision architecture.
    pub vision_patterns: Option<Vec<String>>,
    pub adapter: AdapterKind,
    /// Defaults to `max(d_in, d_out)`.
    pub adapter_hidden: Option<usize>,
    /// Seed of LoRA `A` matrices and the adapter.
    pub seed: u64,
}

impl Default for BridgeSection {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            language_lora: true,
            vision_lora: true,
            language_patterns: None,
            vision_patterns: None,
            adapter: AdapterKind::TwoLayer,
            adapter_hidden: None,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Held-out single-object prompts.
    pub n_single: usize,
    /// Held-out two-object prompts.
    pub n_pair: usize,
    pub frechet_eps: f64,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_single: 500,
            n_pair: 500,
            frechet_eps: FrechetConfig::default().eps,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: String,
    pub language: LanguageSection,
    pub vision: VisionSection,
    pub bridge: BridgeSection,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: "runs/default".into(),
            language: LanguageSection::default(),
            vision: VisionSection::default(),
            bridge: BridgeSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses an override value as a TOML scalar or array, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (e.g. `["train", "steps"]`) in `table`.
pub fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a config from optional file text, environment pairs and
    /// explicit `(dotted.key, value)` overrides, applied in that order.
    pub fn from_sources<I>(file: Option<&str>, env: I, overrides: &[(&str, toml::Value)]) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = match file {
            Some(text) => text
                .parse()
                .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        env.sort();
        for (key, raw) in env {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(str::to_lowercase)
                .collect();
            let path: Vec<&str> = path.iter().map(String::as_str).collect();
            set_path(&mut table, &path, parse_value(&raw))?;
        }
        for (key, value) in overrides {
            let path: Vec<&str> = key.split('.').collect();
            set_path(&mut table, &path, value.clone())?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let cfg = cfg.resolved()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_sources(Some(text), std::iter::empty(), &[])
    }

    pub fn vision_config(&self) -> Result<DenoiserConfig> {
        DenoiserConfig::preset(&self.vision.preset, self.train.resolution)
    }

    /// Fills every defaulted-by-absence field with its concrete value.
    pub fn resolved(mut self) -> Result<Self> {
        let vision = self.vision_config()?;
        let b = &mut self.bridge;
        b.alpha.get_or_insert(b.rank as f64);
        b.language_patterns
            .get_or_insert_with(crate::bridge::default_language_patterns);
        if b.vision_patterns.is_none() {
            b.vision_patterns = Some(match vision.kind {
                DenoiserKind::Unet => crate::bridge::default_unet_patterns(),
                DenoiserKind::Dit => crate::bridge::default_dit_patterns(),
            });
        }
        if b.adapter_hidden.is_none() {
            let d_in = crate::text::TextEncoderConfig::preset(
                &self.language.preset,
                self.language.arch,
                self.language.max_len,
            )?
            .embed_dim;
            let d_out = vision.cross_dim;
            b.adapter_hidden = Some(d_in.max(d_out));
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        FrechetConfig {
            eps: self.eval.frechet_eps,
        }
        .validate()?;
        if self.bridge.rank == 0 {
            return config("bridge.rank must be at least 1");
        }
        if self.sample.resolution != self.train.resolution {
            return config(format!(
                "sample.resolution ({}) must equal train.resolution ({})",
                self.sample.resolution, self.train.resolution
            ));
        }
        if self.sample.num_inference_steps == 0
            || self.schedule.num_steps % self.sample.num_inference_steps != 0
        {
            return config(format!(
                "sample.num_inference_steps ({}) must divide schedule.num_steps ({})",
                self.sample.num_inference_steps, self.schedule.num_steps
            ));
        }
        if !(self.sample.cfg_scale >= 0.0) || !(0.0..=1.0).contains(&self.sample.eta) {
            return config("sample.cfg_scale must be >= 0 and sample.eta in [0, 1]");
        }
        if self.language.max_len < 2 {
            return config("language.max_len must be at least 2");
        }
        self.vision_config()?.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }
}
