//! Oracle alignment scoring against caption semantics and a Fréchet
//! distance between feature sets.

mod classify;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use classify::{
    classify_image, relation_between, Classification, Detection, RejectReason,
    FOREGROUND_THRESHOLD, MIN_RESOLUTION,
};

use crate::error::{config, contract, Error, Result};
use crate::train::scene::{parse_caption, Color, PromptTarget, Shape};

/// Outcome for one scored sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub prompt: String,
    /// Caption of the classified scene, or `None` on REJECT.
    pub predicted: Option<String>,
    pub reject: Option<RejectReason>,
    pub color: bool,
    pub shape: bool,
    /// Only for two-object prompts.
    pub spatial: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub n_samples: usize,
    pub color_accuracy: Option<f64>,
    pub shape_accuracy: Option<f64>,
    pub spatial_accuracy: Option<f64>,
    pub records: Vec<PromptRecord>,
    /// `(index, prompt)` of samples whose prompt is outside the grammar.
    pub excluded: Vec<(usize, String)>,
}

impl AlignmentReport {
    pub fn rejected(&self) -> usize {
        self.records.iter().filter(|r| r.reject.is_some()).count()
    }

    /// Mean of the categories that are present.
    pub fn mean_accuracy(&self) -> Option<f64> {
        let present: Vec<f64> = [self.color_accuracy, self.shape_accuracy, self.spatial_accuracy]
            .into_iter()
            .flatten()
            .collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    /// `key = value` report. Absent categories are written as `absent`.
    pub fn to_kv(&self, frechet: Option<f64>) -> String {
        let acc = |a: Option<f64>| a.map_or("absent".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let n = self.records.len();
        let _ = writeln!(s, "n_samples = {}", self.n_samples);
        let _ = writeln!(s, "n_evaluated = {n}");
        let _ = writeln!(s, "n_excluded = {}", self.excluded.len());
        let _ = writeln!(s, "n_rejected = {}", self.rejected());
        let rate = if n == 0 { 0.0 } else { self.rejected() as f64 / n as f64 };
        let _ = writeln!(s, "reject_rate = {rate:.6}");
        let _ = writeln!(s, "color_accuracy = {}", acc(self.color_accuracy));
        let _ = writeln!(s, "shape_accuracy = {}", acc(self.shape_accuracy));
        let _ = writeln!(s, "spatial_accuracy = {}", acc(self.spatial_accuracy));
        if let Some(f) = frechet {
            let _ = writeln!(s, "frechet_distance = {f:.6}");
        }
        for (i, p) in &self.excluded {
            let _ = writeln!(s, "excluded.{i} = {p:?}");
        }
        let flag = |b: bool| if b { "1" } else { "0" };
        for (i, r) in self.records.iter().enumerate() {
            let spatial = r.spatial.map_or("na", flag);
            let predicted = match (&r.predicted, r.reject) {
                (_, Some(reason)) => format!("REJECT({reason:?})"),
                (Some(p), None) => format!("{p:?}"),
                (None, None) => "none".into(),
            };
            let _ = writeln!(
                s,
                "record.{i} = color={} shape={} spatial={spatial} prompt={:?} predicted={predicted}",
                flag(r.color),
                flag(r.shape),
                r.prompt
            );
        }
        s
    }
}

fn sorted<T: Ord + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = items.collect();
    v.sort();
    v
}

fn score_one(prompt: &str, target: &PromptTarget, got: &Classification) -> PromptRecord {
    let two = target.objects.len() == 2;
    let dets = match got {
        Classification::Reject(reason) => {
            return PromptRecord {
                prompt: prompt.to_string(),
                predicted: None,
                reject: Some(*reason),
                color: false,
                shape: false,
                spatial: two.then_some(false),
            }
        }
        Classification::Scene { detections, .. } => detections,
    };
    let want_colors = sorted(target.objects.iter().map(|o| o.0));
    let want_shapes = sorted(target.objects.iter().map(|o| o.1));
    let color = want_colors == sorted(dets.iter().map(|d| d.object.color));
    let shape = want_shapes == sorted(dets.iter().map(|d| d.object.shape));
    let spatial = if two {
        Some(dets.len() == 2 && {
            // Match detections to named objects by attribute agreement; when
            // both orders agree equally either may satisfy the relation.
            let agree = |d: &Detection, t: &(Color, Shape)| {
                usize::from(d.object.color == t.0) + usize::from(d.object.shape == t.1)
            };
            let straight = agree(&dets[0], &target.objects[0]) + agree(&dets[1], &target.objects[1]);
            let crossed = agree(&dets[1], &target.objects[0]) + agree(&dets[0], &target.objects[1]);
            let holds = |a: &Detection, b: &Detection| {
                Some(relation_between(a.center, b.center)) == target.relation
            };
            (straight >= crossed && holds(&dets[0], &dets[1]))
                || (crossed >= straight && holds(&dets[1], &dets[0]))
        })
    } else {
        None
    };
    let predicted = got.spec().map(|s| s.caption());
    PromptRecord {
        prompt: prompt.to_string(),
        predicted,
        reject: None,
        color,
        shape,
        spatial,
    }
}

/// Scores `(prompt, image)` pairs. Images are `3 x R x R` in `[-1, 1]`.
/// Colour and shape compare multisets of attributes; spatial applies to
/// two-object prompts and judges the relation between the detections
/// matched to the named objects.
pub fn alignment_score<'a, I>(samples: I, resolution: usize) -> AlignmentReport
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    let mut n_samples = 0;
    for (i, (prompt, pixels)) in samples.into_iter().enumerate() {
        n_samples += 1;
        let Some(target) = parse_caption(prompt) else {
            excluded.push((i, prompt.to_string()));
            continue;
        };
        let got = classify_image(pixels, resolution);
        records.push(score_one(prompt, &target, &got));
    }
    let rate = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
    let n = records.len();
    let spatial: Vec<bool> = records.iter().filter_map(|r| r.spatial).collect();
    AlignmentReport {
        n_samples,
        color_accuracy: rate(records.iter().filter(|r| r.color).count(), n),
        shape_accuracy: rate(records.iter().filter(|r| r.shape).count(), n),
        spatial_accuracy: rate(spatial.iter().filter(|&&s| s).count(), spatial.len()),
        records,
        excluded,
    }
}

/// Length of [`features`].
pub const FEATURE_DIM: usize = 56;

/// Classifier-side image statistics: 4x4 cell means per channel (48),
/// per-channel mean and standard deviation (6), foreground fraction and
/// component count.
pub fn features(pixels: &[f32], resolution: usize) -> Vec<f64> {
    let r = resolution;
    let plane = r * r;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for c in 0..3 {
        let ch = &pixels[c * plane..(c + 1) * plane];
        for gy in 0..4 {
            for gx in 0..4 {
                let (ya, yb) = (gy * r / 4, (gy + 1) * r / 4);
                let (xa, xb) = (gx * r / 4, (gx + 1) * r / 4);
                let mut sum = 0.0;
                for y in ya..yb {
                    for x in xa..xb {
                        sum += ch[y * r + x] as f64;
                    }
                }
                out.push(sum / ((yb - ya) * (xb - xa)).max(1) as f64);
            }
        }
    }
    for c in 0..3 {
        let ch = &pixels[c * plane..(c + 1) * plane];
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
        out.push(mean);
        out.push(var.sqrt());
    }
    let mask = classify::foreground(pixels, r);
    out.push(mask.iter().filter(|&&m| m).count() as f64 / plane as f64);
    out.push(classify::components(&mask, r, classify::min_component(r)).len() as f64);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrechetConfig {
    /// Added to both covariance diagonals.
    pub eps: f64,
}

impl Default for FrechetConfig {
    fn default() -> Self {
        Self { eps: 1e-6 }
    }
}

impl FrechetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return config("eval.frechet_eps must be positive");
        }
        Ok(())
    }
}

fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return contract("Fréchet distance needs at least two samples per set");
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return contract("feature rows differ in length");
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mu, cov))
}

/// Eigen-decomposition square root of a symmetric PSD matrix; tiny
/// negative eigenvalues from rounding are clamped to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new((cov + cov.transpose()) * 0.5);
    let max = eig.eigenvalues.max().abs();
    let min = eig.eigenvalues.min();
    max == 0.0 || min <= 1e-12 * max
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` with
/// `(S_a S_b)^(1/2)` traced as `tr sqrt(sqrt(S_a) S_b sqrt(S_a))`.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let root_a = sqrtm_psd(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let mean_term = (mu_a - mu_b).norm_squared();
    (mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet distance between Gaussian fits (unbiased covariance plus
/// `eps I`) of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>], eps: f64) -> Result<f64> {
    if eps < 0.0 {
        return contract("eps must be non-negative");
    }
    let (mu_a, mut cov_a) = moments(a)?;
    let (mu_b, mut cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return contract("feature sets differ in dimension");
    }
    let d = mu_a.len();
    cov_a += DMatrix::identity(d, d) * eps;
    cov_b += DMatrix::identity(d, d) * eps;
    if eps == 0.0 && (is_singular(&cov_a) || is_singular(&cov_b)) {
        return Err(Error::Numerical(format!(
            "covariance is singular ({} and {} samples in {d} dimensions); use eps > 0 or more samples",
            a.len(),
            b.len()
        )));
    }
    Ok(frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b))
}
