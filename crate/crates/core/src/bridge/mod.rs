//! Freezing both backbones, attaching LoRA deltas and the adapter between
//! them, and accounting for what is (and is not) trainable.

mod adapter;
pub mod lora;

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use glob::Pattern;

pub use adapter::{Activation, Adapter, AdapterKind, AdapterSpec};
pub use lora::{DeltaKind, LoraConfig, LoraDelta};

use crate::denoiser::Denoiser;
use crate::diffusion::Denoise;
use crate::error::{config, contract, Result};
use crate::nn::{Layer, Module};
use crate::rng;
use crate::text::{TextEncoder, TextEncoding};

/// Default language-side targets: every projection of every self-attention.
pub fn default_language_patterns() -> Vec<String> {
    vec!["lm.blocks.*.attn.*".into()]
}

/// U-Net targets: ResBlock convs and skips, self- and cross-attention
/// projections. Time-embedding projections are excluded.
pub fn default_unet_patterns() -> Vec<String> {
    vec![
        "unet.*res*.conv1".into(),
        "unet.*res*.conv2".into(),
        "unet.*res*.skip".into(),
        "unet.*.attn.*".into(),
        "unet.*.xattn.*".into(),
    ]
}

/// DiT targets: self- and cross-attention projections.
pub fn default_dit_patterns() -> Vec<String> {
    vec!["dit.blocks.*.attn.*".into(), "dit.blocks.*.xattn.*".into()]
}

pub fn default_vision_patterns(vision: &Denoiser) -> Vec<String> {
    match vision {
        Denoiser::Unet(_) => default_unet_patterns(),
        Denoiser::Dit(_) => default_dit_patterns(),
    }
}

/// One wrapped layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub name: String,
    pub base_shape: Vec<usize>,
    pub rank: usize,
    pub params: usize,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} → ({:?}, r={}, {})",
            self.name, self.base_shape, self.rank, self.params
        )
    }
}

fn compile(patterns: &[String]) -> Result<Vec<Pattern>> {
    patterns
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| crate::Error::Config(format!("bad pattern {p:?}: {e}"))))
        .collect()
}

/// Attaches a fresh delta to every linear/conv layer of `module` whose name
/// matches one of `cfg.target_patterns`. Each pattern must match at least
/// one layer. A-matrix draws depend on `seed` and the layer name only.
pub fn inject_lora(
    module: &dyn Module,
    cfg: &LoraConfig,
    seed: u64,
    dtype: DType,
    device: &Device,
) -> Result<Vec<Site>> {
    if cfg.rank == 0 {
        return config("LoRA rank must be at least 1");
    }
    let patterns = compile(&cfg.target_patterns)?;
    let mut hits = vec![0usize; patterns.len()];
    let mut sites = Vec::new();
    for layer in module.layers() {
        let (name, kind, shape) = match layer {
            Layer::Linear(l) => (&l.name, l.delta_kind(), l.weight.dims().to_vec()),
            Layer::Conv(c) => (&c.name, c.delta_kind(), c.weight.dims().to_vec()),
            Layer::Frozen(_) => continue,
        };
        let mut matched = false;
        for (i, p) in patterns.iter().enumerate() {
            if p.matches(name) {
                hits[i] += 1;
                matched = true;
            }
        }
        if !matched {
            continue;
        }
        let mut r = rng::seeded(rng::derive_seed(seed, name));
        let delta = LoraDelta::init(kind, cfg.rank, cfg.alpha, &mut r, dtype, device)?;
        let params = delta.param_count();
        match layer {
            Layer::Linear(l) => l.attach(delta)?,
            Layer::Conv(c) => c.attach(delta)?,
            Layer::Frozen(_) => unreachable!(),
        }
        sites.push(Site {
            name: name.clone(),
            base_shape: shape,
            rank: cfg.rank,
            params,
        });
    }
    if let Some(i) = hits.iter().position(|&h| h == 0) {
        return config(format!(
            "LoRA pattern {:?} matches no layer",
            cfg.target_patterns[i]
        ));
    }
    Ok(sites)
}

/// Every attached delta in traversal order, as `(layer name, delta)`.
pub fn deltas(module: &dyn Module) -> Vec<(String, LoraDelta)> {
    module
        .layers()
        .into_iter()
        .filter_map(|layer| match layer {
            Layer::Linear(l) => l.lora().map(|d| (l.name.clone(), d.clone())),
            Layer::Conv(c) => c.lora().map(|d| (c.name.clone(), d.clone())),
            Layer::Frozen(_) => None,
        })
        .collect()
}

/// Frozen language model + frozen vision model + trainable deltas + adapter.
#[derive(Debug)]
pub struct BridgedModel {
    lm: TextEncoder,
    vision: Denoiser,
    adapter: Adapter,
    lora_language: Option<LoraConfig>,
    lora_vision: Option<LoraConfig>,
    language_sites: Vec<Site>,
    vision_sites: Vec<Site>,
}

/// Builds a [`BridgedModel`]. A `None` LoRA config leaves that side without
/// deltas (the adapter-only ablation).
pub fn inject(
    lm: TextEncoder,
    vision: Denoiser,
    cfg_language: Option<LoraConfig>,
    cfg_vision: Option<LoraConfig>,
    adapter: AdapterSpec,
    seed: u64,
) -> Result<BridgedModel> {
    if adapter.d_in != lm.embed_dim() {
        return config(format!(
            "adapter input {} does not match language width {}",
            adapter.d_in,
            lm.embed_dim()
        ));
    }
    if adapter.d_out != vision.cross_dim() {
        return config(format!(
            "adapter output {} does not match cross-attention input {}",
            adapter.d_out,
            vision.cross_dim()
        ));
    }
    let dtype = lm.dtype();
    let device = Device::Cpu;
    let language_sites = match &cfg_language {
        Some(c) => inject_lora(&lm, c, rng::derive_seed(seed, "lora.language"), dtype, &device)?,
        None => Vec::new(),
    };
    let vision_sites = match &cfg_vision {
        Some(c) => inject_lora(&vision, c, rng::derive_seed(seed, "lora.vision"), dtype, &device)?,
        None => Vec::new(),
    };
    let adapter = Adapter::init(
        adapter,
        &mut rng::seeded(rng::derive_seed(seed, "adapter")),
        dtype,
        &device,
    )?;
    Ok(BridgedModel {
        lm,
        vision,
        adapter,
        lora_language: cfg_language,
        lora_vision: cfg_vision,
        language_sites,
        vision_sites,
    })
}

/// Per-component parameter counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterReport {
    pub language_base: usize,
    pub vision_base: usize,
    pub adapter: usize,
    pub language_lora: usize,
    pub vision_lora: usize,
}

impl ParameterReport {
    pub fn base(&self) -> usize {
        self.language_base + self.vision_base
    }

    pub fn trainable(&self) -> usize {
        self.adapter + self.language_lora + self.vision_lora
    }

    pub fn total(&self) -> usize {
        self.base() + self.trainable()
    }

    pub fn trainable_fraction(&self) -> f64 {
        self.trainable() as f64 / self.total() as f64
    }
}

impl fmt::Display for ParameterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "language_base = {}", self.language_base)?;
        writeln!(f, "vision_base = {}", self.vision_base)?;
        writeln!(f, "language_lora = {}", self.language_lora)?;
        writeln!(f, "vision_lora = {}", self.vision_lora)?;
        writeln!(f, "adapter = {}", self.adapter)?;
        writeln!(f, "base_total = {}", self.base())?;
        writeln!(f, "trainable_total = {}", self.trainable())?;
        writeln!(f, "total = {}", self.total())?;
        writeln!(f, "trainable_fraction = {:.6}", self.trainable_fraction())
    }
}

/// Bit-exact copy of every base tensor, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl Snapshot {
    pub fn of(modules: &[&dyn Module]) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for m in modules {
            for (name, t) in m.base_tensors() {
                let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                if tensors.insert(name.clone(), values).is_some() {
                    return contract(format!("duplicate base tensor name {name}"));
                }
            }
        }
        Ok(Self { tensors })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenReport {
    pub tensors_checked: usize,
    pub max_abs_diff: f64,
    /// `(name, max abs diff)` of every tensor that changed, largest first.
    pub offenders: Vec<(String, f64)>,
}

impl FrozenReport {
    pub fn passed(&self) -> bool {
        self.offenders.is_empty()
    }
}

/// Passes iff every tensor in `after` is bit-identical to `before`.
pub fn verify_frozen(before: &Snapshot, after: &Snapshot) -> Result<FrozenReport> {
    if before.tensors.len() != after.tensors.len()
        || before.tensors.keys().zip(after.tensors.keys()).any(|(a, b)| a != b)
    {
        return contract("snapshots cover different tensor sets");
    }
    let mut offenders = Vec::new();
    let mut max_abs_diff = 0.0f64;
    for ((name, a), b) in before.tensors.iter().zip(after.tensors.values()) {
        if a.len() != b.len() {
            return contract(format!("tensor {name} changed size"));
        }
        let mut changed = false;
        let mut diff = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            if x.to_bits() != y.to_bits() {
                changed = true;
                diff = diff.max((x - y).abs());
            }
        }
        if changed {
            // A NaN difference still counts as a change.
            let diff = if diff.is_nan() { f64::INFINITY } else { diff };
            max_abs_diff = max_abs_diff.max(diff);
            offenders.push((name.clone(), diff));
        }
    }
    offenders.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(FrozenReport {
        tensors_checked: before.tensors.len(),
        max_abs_diff,
        offenders,
    })
}

impl BridgedModel {
    pub fn lm(&self) -> &TextEncoder {
        &self.lm
    }

    pub fn vision(&self) -> &Denoiser {
        &self.vision
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn lora_language(&self) -> Option<&LoraConfig> {
        self.lora_language.as_ref()
    }

    pub fn lora_vision(&self) -> Option<&LoraConfig> {
        self.lora_vision.as_ref()
    }

    /// Language sites, then vision sites, in traversal order.
    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.language_sites.iter().chain(&self.vision_sites)
    }

    /// One `name → (shape, r=rank, params)` line per wrapped layer.
    pub fn site_report(&self) -> String {
        self.sites().map(|s| format!("{s}\n")).collect()
    }

    pub fn encode_prompts<S: AsRef<str>>(&self, prompts: &[S]) -> Result<TextEncoding> {
        self.lm.encode_prompts(prompts)
    }

    /// Exactly the deltas (`{layer}.lora_a`, `{layer}.lora_b`) and adapter
    /// tensors: language deltas, vision deltas, adapter.
    pub fn trainable_parameters(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (name, d) in deltas(&self.lm).into_iter().chain(deltas(&self.vision)) {
            out.push((format!("{name}.lora_a"), d.a));
            out.push((format!("{name}.lora_b"), d.b));
        }
        out.extend(self.adapter.parameters().iter().cloned());
        out
    }

    /// Counts from closed forms: `r (d_in + d_out)` per linear site,
    /// `r (c_in k^2 + c_out)` per conv site, and the adapter formula.
    pub fn count_parameters(&self) -> ParameterReport {
        let base = |m: &dyn Module| -> usize {
            m.base_tensors().iter().map(|(_, t)| t.elem_count()).sum()
        };
        let lora = |m: &dyn Module| -> usize {
            deltas(m).iter().map(|(_, d)| d.kind.param_count(d.rank)).sum()
        };
        ParameterReport {
            language_base: base(&self.lm),
            vision_base: base(&self.vision),
            adapter: self.adapter.spec().param_count(),
            language_lora: lora(&self.lm),
            vision_lora: lora(&self.vision),
        }
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        Snapshot::of(&[&self.lm, &self.vision])
    }

    pub fn base_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.lm.base_tensors();
        out.extend(self.vision.base_tensors());
        out
    }
}

impl Denoise for BridgedModel {
    fn image_shape(&self) -> (usize, usize, usize) {
        let c = self.vision.config();
        (c.in_channels, c.resolution, c.resolution)
    }

    fn text_dim(&self) -> usize {
        self.lm.embed_dim()
    }

    fn dtype(&self) -> DType {
        self.lm.dtype()
    }

    fn predict_eps(&self, x_t: &Tensor, ts: &[usize], text: &TextEncoding) -> Result<Tensor> {
        let c = self.adapter.adapt(text)?;
        self.vision.forward(x_t, ts, &c.embeddings, &c.mask)
    }
}
