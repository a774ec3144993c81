mod common;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use tinybridge::denoiser::{Denoiser, DenoiserConfig, DenoiserKind};
use tinybridge::nn::Module;
use tinybridge::rng;
use tinybridge::text::{ArchKind, TextEncoder, TextEncoderConfig};

use common::*;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn layer_norm(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * w[i] + b[i])
        .collect()
}

/// `y = W x (+ b)` with `W` stored row-major as `d_out x d_in`.
fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let d_in = x.len();
    let d_out = w.len() / d_in;
    (0..d_out)
        .map(|o| {
            let dot: f64 = (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum();
            dot + b.map_or(0.0, |b| b[o])
        })
        .collect()
}

/// Plain-loop forward pass of an encoder-only stack over one sequence.
fn reference_encoder(
    p: &HashMap<String, Vec<f64>>,
    ids: &[u32],
    mask: &[bool],
    d: usize,
    heads: usize,
    layers: usize,
) -> Vec<Vec<f64>> {
    let l = ids.len();
    let tok = &p["lm.tok_emb"];
    let pos = &p["lm.pos_emb"];
    let mut x: Vec<Vec<f64>> = (0..l)
        .map(|i| (0..d).map(|j| tok[ids[i] as usize * d + j] + pos[i * d + j]).collect())
        .collect();
    let dh = d / heads;
    for k in 0..layers {
        let g = |s: &str| p[&format!("lm.blocks.{k}.{s}")].as_slice();
        let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, g("ln1.weight"), g("ln1.bias"))).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| affine(g("attn.q.weight"), None, r)).collect();
        let kk: Vec<Vec<f64>> = h.iter().map(|r| affine(g("attn.k.weight"), None, r)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| affine(g("attn.v.weight"), None, r)).collect();
        let mut mixed = vec![vec![0.0; d]; l];
        for head in 0..heads {
            let span = head * dh..(head + 1) * dh;
            for i in 0..l {
                let scores: Vec<Option<f64>> = (0..l)
                    .map(|j| {
                        mask[j].then(|| {
                            span.clone().map(|c| q[i][c] * kk[j][c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                    })
                    .collect();
                let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
                let z: f64 = e.iter().sum();
                for c in span.clone() {
                    mixed[i][c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        for i in 0..l {
            let o = affine(g("attn.o.weight"), Some(g("attn.o.bias")), &mixed[i]);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let h = layer_norm(&x[i], g("ln2.weight"), g("ln2.bias"));
            let f: Vec<f64> = affine(g("mlp.fc1.weight"), Some(g("mlp.fc1.bias")), &h)
                .into_iter()
                .map(gelu)
                .collect();
            let f = affine(g("mlp.fc2.weight"), Some(g("mlp.fc2.bias")), &f);
            for c in 0..d {
                x[i][c] += f[c];
            }
        }
    }
    for i in 0..l {
        if !mask[i] {
            x[i] = vec![0.0; d];
        }
    }
    x
}

#[test]
fn two_layer_encoder_matches_plain_loop_reference() {
    let cfg = TextEncoderConfig::preset("lm-small", ArchKind::EncoderOnly, 8).unwrap();
    assert_eq!(cfg.num_layers, 2);
    let (d, heads) = (cfg.embed_dim, cfg.num_heads);
    let lm = TextEncoder::new(cfg, 5, DType::F64, &Device::Cpu).unwrap();
    let params: HashMap<String, Vec<f64>> = lm
        .base_tensors()
        .into_iter()
        .map(|(n, t)| (n, to_f64(&t)))
        .collect();
    let tokens = lm.tokenize("a green triangle");
    let want = reference_encoder(&params, &tokens.ids, &tokens.mask, d, heads, 2);
    let got = lm.encode(std::slice::from_ref(&tokens)).unwrap().embeddings;
    let got = got.get(0).unwrap().to_vec2::<f64>().unwrap();
    let mut worst = 0.0f64;
    for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
        worst = worst.max((g - w).abs());
    }
    assert!(worst < 1e-10, "max abs diff {worst}");
    // Frozen summary of the same pass.
    let sum: f64 = got.iter().flatten().sum();
    let sq: f64 = got.iter().flatten().map(|v| v * v).sum();
    check_frozen("lm-small seed 5", &[sum, sq, got[1][0], got[4][63]], LM_FROZEN);
}

/// Values recorded from the first verified build; `TINYBRIDGE_BLESS=1`
/// prints the current ones.
fn check_frozen(what: &str, got: &[f64], want: &[f64]) {
    let report = format!("{what}: {got:?}");
    if std::env::var("TINYBRIDGE_BLESS").as_deref() == Ok("1") {
        eprintln!("{report}");
    }
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{report} vs {want:?}");
    }
}

const LM_FROZEN: &[f64] = &[20.711480947458103, 334.7062977410325, 0.5351971728929495, 0.47012085878899457];
const UNET_FROZEN: &[f64] = &[-28.454933313329043, 46.75045284037607, -0.04931749680489829, -0.10002635634208701];
const DIT_FROZEN: &[f64] = &[-18.04781388458636, 176.49866904567185, -1.4589585663576634, 0.02070174920150869];

/// Fixed inputs for a resolution-8 model with cross width 8.
fn fixed_inputs() -> (Tensor, Vec<usize>, Tensor, Tensor) {
    let mut r = rng::seeded(21);
    let x = rng::randn(&mut r, (2, 3, TINY_RES, TINY_RES), 1.0, DType::F64, &Device::Cpu).unwrap();
    let c = rng::randn(&mut r, (2, 5, 8), 1.0, DType::F64, &Device::Cpu).unwrap();
    let mask = Tensor::new(&[[1u8, 1, 1, 0, 0], [1, 1, 1, 1, 1]], &Device::Cpu).unwrap();
    (x, vec![10, 500], c, mask)
}

fn summary(t: &Tensor) -> Vec<f64> {
    let v = to_f64(t);
    let n = v.len();
    vec![v.iter().sum(), v.iter().map(|x| x * x).sum(), v[0], v[n - 1]]
}

#[test]
fn unet_regression_tensor() {
    let m = Denoiser::new(DenoiserConfig::tiny_unet(), 13, DType::F64, &Device::Cpu).unwrap();
    let (x, ts, c, mask) = fixed_inputs();
    let y = m.forward(&x, &ts, &c, &mask).unwrap();
    check_frozen("tiny unet seed 13", &summary(&y), UNET_FROZEN);
}

#[test]
fn dit_regression_tensor() {
    let m = Denoiser::new(tiny_dit_config(), 13, DType::F64, &Device::Cpu).unwrap();
    let (x, ts, c, mask) = fixed_inputs();
    let y = m.forward(&x, &ts, &c, &mask).unwrap();
    check_frozen("tiny dit seed 13", &summary(&y), DIT_FROZEN);
}

fn small_config(dit: bool, base: usize, res_factor: usize, heads: usize) -> DenoiserConfig {
    if dit {
        DenoiserConfig {
            kind: DenoiserKind::Dit,
            base_channels: 4 * base * heads,
            channel_multipliers: Vec::new(),
            depth: 1,
            cross_dim: 4 * heads,
            num_heads: heads,
            patch_size: 2,
            in_channels: 3,
            resolution: 4 * res_factor,
        }
    } else {
        DenoiserConfig {
            kind: DenoiserKind::Unet,
            base_channels: base * 2,
            channel_multipliers: vec![1, 2],
            depth: 0,
            cross_dim: 4 * heads,
            num_heads: heads,
            patch_size: 1,
            in_channels: 3,
            resolution: 4 * res_factor,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 12,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn output_shape_equals_input_shape_and_masked_rows_are_ignored(
        dit in any::<bool>(),
        base in 2usize..5,
        res_factor in 1usize..4,
        heads in 1usize..3,
        batch in 1usize..3,
        len in 2usize..5,
        seed in any::<u64>(),
    ) {
        let cfg = small_config(dit, base, res_factor, heads);
        let m = Denoiser::new(cfg.clone(), seed, DType::F64, &Device::Cpu).unwrap();
        let mut r = rng::seeded(seed ^ 1);
        let res = cfg.resolution;
        let x = rng::randn(&mut r, (batch, 3, res, res), 1.0, DType::F64, &Device::Cpu).unwrap();
        let c = rng::randn(&mut r, (batch, len, cfg.cross_dim), 1.0, DType::F64, &Device::Cpu).unwrap();
        let mut m_rows = vec![1u8; batch * len];
        for b in 0..batch {
            m_rows[b * len + len - 1] = 0;
        }
        let mask = Tensor::from_vec(m_rows, (batch, len), &Device::Cpu).unwrap();
        let ts: Vec<usize> = (0..batch).map(|i| 1 + 300 * i).collect();
        let y = m.forward(&x, &ts, &c, &mask).unwrap();
        prop_assert_eq!(y.dims(), x.dims());

        let noise = rng::randn(&mut r, (batch, 1, cfg.cross_dim), 5.0, DType::F64, &Device::Cpu).unwrap();
        let c2 = Tensor::cat(&[c.narrow(1, 0, len - 1).unwrap(), noise], 1).unwrap();
        let y2 = m.forward(&x, &ts, &c2, &mask).unwrap();
        prop_assert_eq!(to_f64(&y), to_f64(&y2));
    }
}
