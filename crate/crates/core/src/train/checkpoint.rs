//! Versioned checkpoint container.
//!
//! ```text
//! header   magic "TBCK" | u32 version | [32] sha256(config) | u64 payload_len | [32] sha256(payload)
//! payload  str config_toml | u64 step
//!          [32] rng_seed | u64 rng_stream | u128 rng_word_pos
//!          u32 n | n x tensor                  trainable tensors
//!          u64 adam_t | u32 k | k x tensor | k x tensor     first, second moments
//! tensor   str name | u8 dtype (0 f32, 1 f64) | u32 ndim | ndim x u64 dim | raw LE data
//! str      u32 byte_len | utf-8 bytes
//! ```
//! All integers little-endian. Base weights are not stored; they are rebuilt
//! from the init seeds inside the config.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"TBCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32 + 8 + 32;

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub config_toml: String,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_str(out, name);
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => out.push(0),
        DType::F64 => out.push(1),
        other => return bad(format!("cannot store dtype {other:?}")),
    }
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend((d as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|x| out.extend(x.to_le_bytes())),
        _ => flat.to_vec1::<f64>()?.iter().for_each(|x| out.extend(x.to_le_bytes())),
    }
    Ok(())
}

/// Serialises a record to bytes.
pub fn encode(rec: &CheckpointRecord) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    put_str(&mut p, &rec.config_toml);
    p.extend(rec.step.to_le_bytes());
    p.extend(rec.rng.seed);
    p.extend(rec.rng.stream.to_le_bytes());
    p.extend(rec.rng.word_pos.to_le_bytes());
    p.extend((rec.tensors.len() as u32).to_le_bytes());
    for (name, t) in &rec.tensors {
        put_tensor(&mut p, name, t)?;
    }
    p.extend(rec.adam_t.to_le_bytes());
    if rec.adam_m.len() != rec.adam_v.len() {
        return bad("first and second moment lists differ in length");
    }
    p.extend((rec.adam_m.len() as u32).to_le_bytes());
    for (i, t) in rec.adam_m.iter().enumerate() {
        put_tensor(&mut p, &format!("m.{i}"), t)?;
    }
    for (i, t) in rec.adam_v.iter().enumerate() {
        put_tensor(&mut p, &format!("v.{i}"), t)?;
    }

    let mut out = Vec::with_capacity(HEADER_LEN + p.len());
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(Sha256::digest(rec.config_toml.as_bytes()));
    out.extend((p.len() as u64).to_le_bytes());
    out.extend(Sha256::digest(&p));
    out.extend(p);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return bad("truncated payload");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).or_else(|_| bad("string is not utf-8"))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.string()?;
        let dtype = self.u8()?;
        let ndim = self.u32()? as usize;
        let dims = (0..ndim)
            .map(|_| Ok(self.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let raw = self.take(n * 4)?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = self.take(n * 8)?;
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return bad(format!("unknown dtype tag {other} for {name}")),
        };
        Ok((name, t))
    }
}

/// Parses and integrity-checks bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<CheckpointRecord> {
    if bytes.len() < HEADER_LEN {
        return bad("file shorter than header");
    }
    if &bytes[..4] != MAGIC {
        return bad("not a checkpoint (bad magic)");
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return bad(format!("format version {version}, expected {VERSION}"));
    }
    let config_digest = &bytes[8..40];
    let len = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes")) as usize;
    let payload_digest = &bytes[48..80];
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != len {
        return bad(format!("payload is {} bytes, header says {len}", payload.len()));
    }
    if Sha256::digest(payload).as_slice() != payload_digest {
        return bad("payload integrity check failed");
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let config_toml = r.string()?;
    if Sha256::digest(config_toml.as_bytes()).as_slice() != config_digest {
        return bad("config digest does not match embedded config");
    }
    let step = r.u64()?;
    let rng = RngState {
        seed: r.array()?,
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.array()?),
    };
    let n = r.u32()? as usize;
    let tensors = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let adam_t = r.u64()?;
    let k = r.u32()? as usize;
    let adam_m = (0..k).map(|_| Ok(r.tensor()?.1)).collect::<Result<Vec<_>>>()?;
    let adam_v = (0..k).map(|_| Ok(r.tensor()?.1)).collect::<Result<Vec<_>>>()?;
    if r.pos != payload.len() {
        return bad("trailing bytes after payload");
    }
    Ok(CheckpointRecord {
        config_toml,
        step,
        rng,
        tensors,
        adam_t,
        adam_m,
        adam_v,
    })
}

/// Writes via a temporary sibling and rename so readers never see a
/// partial file.
pub fn save(rec: &CheckpointRecord, path: &Path) -> Result<()> {
    let bytes = encode(rec)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointRecord> {
    decode(&std::fs::read(path)?)
}
