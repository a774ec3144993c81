use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::vocab::{tokenize, Tokens, Vocabulary};
use super::TextEncoding;
use crate::error::{config, contract, Result};
use crate::nn::{self, Attention, Frozen, Layer, LayerNorm, Linear, Module};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    EncoderOnly,
    EncoderDecoder,
    DecoderOnly,
}

impl ArchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchKind::EncoderOnly => "encoder_only",
            ArchKind::EncoderDecoder => "encoder_decoder",
            ArchKind::DecoderOnly => "decoder_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub arch: ArchKind,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub vocab: Vocabulary,
}

impl TextEncoderConfig {
    /// Named size presets: `lm-small`, `lm-base`, `lm-large`.
    pub fn preset(name: &str, arch: ArchKind, max_len: usize) -> Result<Self> {
        let (num_layers, embed_dim, num_heads) = match name {
            "lm-small" => (2, 64, 4),
            "lm-base" => (4, 128, 4),
            "lm-large" => (6, 192, 6),
            other => return config(format!("unknown language preset {other:?}")),
        };
        Ok(Self {
            arch,
            num_layers,
            embed_dim,
            num_heads,
            max_len,
            vocab: Vocabulary::builtin(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_len < 2 {
            return config("max_len must be at least 2");
        }
        Ok(())
    }
}

/// Pre-norm transformer block, optionally with cross-attention (decoder
/// half of an encoder-decoder model).
#[derive(Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn init(
        prefix: &str,
        d: usize,
        heads: usize,
        with_cross: bool,
        rng: &mut Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let attn_name = if with_cross { "self_attn" } else { "attn" };
        let cross = if with_cross {
            Some((
                LayerNorm::new(&format!("{prefix}.ln_cross"), d, dtype, device)?,
                Attention::init(
                    &format!("{prefix}.cross_attn"),
                    d,
                    d,
                    d,
                    heads,
                    rng,
                    dtype,
                    device,
                )?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), d, dtype, device)?,
            attn: Attention::init(
                &format!("{prefix}.{attn_name}"),
                d,
                d,
                d,
                heads,
                rng,
                dtype,
                device,
            )?,
            cross,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), d, dtype, device)?,
            fc1: Linear::init(format!("{prefix}.mlp.fc1"), d, 4 * d, true, rng, dtype, device)?,
            fc2: Linear::init(format!("{prefix}.mlp.fc2"), 4 * d, d, true, rng, dtype, device)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        self_bias: &Tensor,
        memory: Option<(&Tensor, &Tensor)>,
    ) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let mut x = (x + self.attn.attend(&h, &h, Some(self_bias))?)?;
        if let (Some((ln, cross)), Some((mem, mem_bias))) = (&self.cross, memory) {
            let h = ln.forward(&x)?;
            x = (&x + cross.attend(&h, mem, Some(mem_bias))?)?;
        }
        let h = self.ln2.forward(&x)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.gelu()?)?;
        Ok((x + h)?)
    }
}

impl Module for Block {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        self.ln1.collect(out);
        self.attn.collect(out);
        if let Some((ln, cross)) = &self.cross {
            ln.collect(out);
            cross.collect(out);
        }
        self.ln2.collect(out);
        self.fc1.collect(out);
        self.fc2.collect(out);
    }
}

/// Miniature transformer language model producing `c = f(y)`.
///
/// `encoder_only` attends bidirectionally, `decoder_only` causally; an
/// `encoder_decoder` model carries a decoder stack but only its encoder
/// stack feeds [`TextEncoder::encode`].
#[derive(Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    tok_emb: Frozen,
    pos_emb: Frozen,
    blocks: Vec<Block>,
    decoder: Vec<Block>,
    dtype: DType,
    device: Device,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::seeded(seed);
        let d = cfg.embed_dim;
        let tok_emb = Frozen::new(
            "lm.tok_emb",
            rng::randn(&mut rng, (cfg.vocab.len(), d), 1.0, dtype, device)?,
        );
        let pos_emb = Frozen::new(
            "lm.pos_emb",
            rng::randn(&mut rng, (cfg.max_len, d), 0.1, dtype, device)?,
        );
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                Block::init(
                    &format!("lm.blocks.{i}"),
                    d,
                    cfg.num_heads,
                    false,
                    &mut rng,
                    dtype,
                    device,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = if cfg.arch == ArchKind::EncoderDecoder {
            (0..cfg.num_layers)
                .map(|i| {
                    Block::init(
                        &format!("lm.decoder.{i}"),
                        d,
                        cfg.num_heads,
                        true,
                        &mut rng,
                        dtype,
                        device,
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            decoder,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn tokenize(&self, prompt: &str) -> Tokens {
        tokenize(&self.cfg.vocab, prompt, self.cfg.max_len)
    }

    /// Tokenizes and encodes a batch of prompts.
    pub fn encode_prompts<S: AsRef<str>>(&self, prompts: &[S]) -> Result<TextEncoding> {
        let tokens: Vec<Tokens> = prompts.iter().map(|p| self.tokenize(p.as_ref())).collect();
        self.encode(&tokens)
    }

    /// Final-layer hidden states `(B, L, d_L)` with PAD rows zeroed.
    pub fn encode(&self, batch: &[Tokens]) -> Result<TextEncoding> {
        let (ids, mask) = self.stack(batch)?;
        self.encode_ids(&ids, &mask)
    }

    fn stack(&self, batch: &[Tokens]) -> Result<(Tensor, Tensor)> {
        if batch.is_empty() {
            return contract("cannot encode an empty batch");
        }
        let len = batch[0].ids.len();
        if len > self.cfg.max_len {
            return contract(format!(
                "token sequence of length {len} exceeds max_len {}",
                self.cfg.max_len
            ));
        }
        if batch.iter().any(|t| t.ids.len() != len || t.mask.len() != len) {
            return contract("token sequences in a batch must share one length");
        }
        let ids: Vec<u32> = batch.iter().flat_map(|t| t.ids.iter().copied()).collect();
        let mask: Vec<u8> = batch
            .iter()
            .flat_map(|t| t.mask.iter().map(|&m| u8::from(m)))
            .collect();
        Ok((
            Tensor::from_vec(ids, (batch.len(), len), &self.device)?,
            Tensor::from_vec(mask, (batch.len(), len), &self.device)?,
        ))
    }

    /// Encodes raw `(B, L)` id and mask tensors.
    pub fn encode_ids(&self, ids: &Tensor, mask: &Tensor) -> Result<TextEncoding> {
        let (b, l) = ids.dims2()?;
        if l > self.cfg.max_len {
            return contract(format!("sequence length {l} exceeds max_len {}", self.cfg.max_len));
        }
        if mask.dims2()? != (b, l) {
            return contract("mask shape must match token ids");
        }
        let d = self.cfg.embed_dim;
        if ids.flatten_all()?.to_vec1::<u32>()?.iter().any(|&i| i as usize >= self.cfg.vocab.len()) {
            return contract("token id outside the vocabulary");
        }
        let tok = self
            .tok_emb
            .tensor
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, d))?;
        let pos = self.pos_emb.tensor.narrow(0, 0, l)?.unsqueeze(0)?;
        let mut x = tok.broadcast_add(&pos)?;

        let pad_bias = nn::key_padding_bias(mask, self.dtype)?;
        let bias = match self.cfg.arch {
            ArchKind::DecoderOnly => {
                pad_bias.broadcast_add(&nn::causal_bias(l, self.dtype, &self.device)?)?
            }
            _ => pad_bias,
        };
        for block in &self.blocks {
            x = block.forward(&x, &bias, None)?;
        }
        let keep = mask.to_dtype(self.dtype)?.unsqueeze(2)?;
        Ok(TextEncoding {
            embeddings: x.broadcast_mul(&keep)?,
            mask: mask.clone(),
        })
    }

    /// Runs the decoder stack of an encoder-decoder model over `target`
    /// tokens while attending to `memory`. Only used by warm-start
    /// utilities; the bridge consumes [`TextEncoder::encode`] alone.
    pub fn decode(&self, memory: &TextEncoding, target: &[Tokens]) -> Result<Tensor> {
        if self.decoder.is_empty() {
            return contract(format!("{} model has no decoder stack", self.cfg.arch.as_str()));
        }
        let (ids, mask) = self.stack(target)?;
        let (b, l) = ids.dims2()?;
        let d = self.cfg.embed_dim;
        let mut x = self
            .tok_emb
            .tensor
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, d))?
            .broadcast_add(&self.pos_emb.tensor.narrow(0, 0, l)?.unsqueeze(0)?)?;
        let self_bias = nn::key_padding_bias(&mask, self.dtype)?
            .broadcast_add(&nn::causal_bias(l, self.dtype, &self.device)?)?;
        let mem_bias = nn::key_padding_bias(&memory.mask, self.dtype)?;
        for block in &self.decoder {
            x = block.forward(&x, &self_bias, Some((&memory.embeddings, &mem_bias)))?;
        }
        Ok(x)
    }

    /// `encode(tokenize(""))` for a batch of one.
    pub fn null_encoding(&self) -> Result<TextEncoding> {
        self.encode_prompts(&[""])
    }

    #[cfg(test)]
    pub(crate) fn zero_positional_embeddings(&mut self) -> Result<()> {
        self.pos_emb.tensor = self.pos_emb.tensor.zeros_like()?;
        Ok(())
    }
}

impl Module for TextEncoder {
    fn collect<'a>(&'a self, out: &mut Vec<Layer<'a>>) {
        out.push(Layer::Frozen(&self.tok_emb));
        out.push(Layer::Frozen(&self.pos_emb));
        self.blocks.collect(out);
        self.decoder.collect(out);
    }
}
