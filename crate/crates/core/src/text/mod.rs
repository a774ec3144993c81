//! Word-level tokenizer and miniature transformer language models.

mod encoder;
mod vocab;

pub use encoder::{ArchKind, TextEncoder, TextEncoderConfig};
pub use vocab::{token_count, tokenize, Tokens, Vocabulary, BOS, BUILTIN_VOCAB, EOS, PAD, UNK};

use candle_core::Tensor;

use crate::error::{contract, Result};

/// Per-position embeddings `(B, L, d)` and their validity mask `(B, L)`
/// (`u8`, 1 = real token). Masked rows are zero.
#[derive(Debug, Clone)]
pub struct TextEncoding {
    pub embeddings: Tensor,
    pub mask: Tensor,
}

impl TextEncoding {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.embeddings.dims3()?.0)
    }

    pub fn len(&self) -> Result<usize> {
        Ok(self.embeddings.dims3()?.1)
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.embeddings.dims3()?.2)
    }

    /// Repeats a batch-of-one encoding `batch` times; a batch that already
    /// has the requested size is returned as is.
    pub fn expand_to(&self, batch: usize) -> Result<Self> {
        let (b, l, d) = self.embeddings.dims3()?;
        if b == batch {
            return Ok(self.clone());
        }
        if b != 1 {
            return contract(format!("cannot expand a batch of {b} to {batch}"));
        }
        Ok(Self {
            embeddings: self.embeddings.broadcast_as((batch, l, d))?.contiguous()?,
            mask: self.mask.broadcast_as((batch, l))?.contiguous()?,
        })
    }

    /// Concatenates encodings along the batch axis.
    pub fn cat(parts: &[&TextEncoding]) -> Result<Self> {
        let emb: Vec<&Tensor> = parts.iter().map(|p| &p.embeddings).collect();
        let mask: Vec<&Tensor> = parts.iter().map(|p| &p.mask).collect();
        Ok(Self {
            embeddings: Tensor::cat(&emb, 0)?,
            mask: Tensor::cat(&mask, 0)?,
        })
    }
}
