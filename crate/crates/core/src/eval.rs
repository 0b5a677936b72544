//! Ranking metrics (AP, mAP, top-5 mAP, HIT@1) and a Frechet-distance
//! diagnostic between Gaussian fits of feature distributions.
//!
//! Ranking ties are broken by ascending clip index, so every metric is
//! deterministic.

use crate::data::Dataset;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("need at least 2 samples per set, got {0} and {1}")]
    DegenerateSamples(usize, usize),
    #[error("non-finite covariance")]
    NonFiniteCovariance,
    #[error("video {0} has no audio; FID features need both modalities")]
    MissingAudio(String),
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricSummary {
    pub map: f64,
    pub top5_map: f64,
    pub hit_at_1: f64,
    pub mean_l_pri: f64,
    pub n_videos: usize,
    /// Videos without any positive clip, excluded from the mAP means.
    pub skipped: usize,
}

/// Predictions and binarized targets for one video.
#[derive(Debug, Clone)]
pub struct VideoEval {
    pub scores: Vec<f64>,
    pub positives: Vec<bool>,
}

/// Clip indices in ranking order: descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Average precision: mean over positives of precision at their rank.
/// Returns `None` when the video has no positive clip.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(EvalError::LengthMismatch(scores.len(), positives.len()));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Ok(None);
    }
    let order = ranking(scores);
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(acc / total_pos as f64))
}

/// AP truncated to the top five ranked clips, denominator min(5, #positives).
pub fn top5_average_precision(scores: &[f64], positives: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(EvalError::LengthMismatch(scores.len(), positives.len()));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Ok(None);
    }
    let order = ranking(scores);
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().take(5).enumerate() {
        if positives[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(acc / total_pos.min(5) as f64))
}

pub fn map(videos: &[VideoEval]) -> Result<f64> {
    mean_over_videos(videos, average_precision)
}

pub fn top5_map(videos: &[VideoEval]) -> Result<f64> {
    mean_over_videos(videos, top5_average_precision)
}

fn mean_over_videos(
    videos: &[VideoEval],
    per_video: fn(&[f64], &[bool]) -> Result<Option<f64>>,
) -> Result<f64> {
    if videos.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for v in videos {
        if let Some(ap) = per_video(&v.scores, &v.positives)? {
            acc += ap;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(acc / n as f64)
}

/// Fraction of videos whose top-ranked clip is a positive.
pub fn hit_at_1(videos: &[VideoEval]) -> Result<f64> {
    if videos.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut hits = 0usize;
    for v in videos {
        if v.scores.len() != v.positives.len() {
            return Err(EvalError::LengthMismatch(v.scores.len(), v.positives.len()));
        }
        let top = ranking(&v.scores)[0];
        if v.positives[top] {
            hits += 1;
        }
    }
    Ok(hits as f64 / videos.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub enum BinarizeRule {
    Threshold(f64),
    TopFraction(f64),
}

pub fn binarize_targets(targets: &[f64], rule: BinarizeRule) -> Vec<bool> {
    match rule {
        BinarizeRule::Threshold(t) => targets.iter().map(|&y| y >= t).collect(),
        BinarizeRule::TopFraction(q) => {
            let n = targets.len();
            let k = ((q * n as f64).round() as usize).min(n);
            let order = ranking(targets);
            let mut out = vec![false; n];
            for &i in order.iter().take(k) {
                out[i] = true;
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShiftScore {
    pub fid: f64,
    pub dim: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub epsilon: f64,
}

fn mean_and_cov(set: &[f64], n: usize, d: usize, eps: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut mu = DVector::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mu[j] += set[i * d + j];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = DVector::from_fn(d, |j, _| set[i * d + j] - mu[j]);
        cov += &row * row.transpose();
    }
    cov /= (n - 1) as f64;
    if cov.iter().any(|x| !x.is_finite()) {
        return Err(EvalError::NonFiniteCovariance);
    }
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    Ok((mu, cov))
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of two sample sets (rows = samples).
pub fn fid_shift(set_a: &[f64], n_a: usize, set_b: &[f64], n_b: usize, dim: usize) -> Result<ShiftScore> {
    if n_a < 2 || n_b < 2 {
        return Err(EvalError::DegenerateSamples(n_a, n_b));
    }
    let eps = 1e-6;
    let (mu1, cov1) = mean_and_cov(set_a, n_a, dim, eps)?;
    let (mu2, cov2) = mean_and_cov(set_b, n_b, dim, eps)?;
    let s1h = sqrtm_psd(&cov1);
    let inner = &s1h * &cov2 * &s1h;
    let cross = sqrtm_psd(&inner);
    let dmu = &mu1 - &mu2;
    let fid = dmu.norm_squared() + (cov1 + cov2 - cross * 2.0).trace();
    Ok(ShiftScore {
        fid: fid.max(0.0),
        dim,
        n_a,
        n_b,
        epsilon: eps,
    })
}

/// Per-video FID feature: concat(mean-pooled visual, mean-pooled audio).
pub fn video_fid_features(dataset: &Dataset) -> Result<(Vec<f64>, usize, usize)> {
    let d = dataset.d_v + dataset.d_a;
    let mut out = Vec::with_capacity(dataset.videos.len() * d);
    for v in &dataset.videos {
        let n = v.n_clips as f64;
        for j in 0..dataset.d_v {
            let s: f64 = (0..v.n_clips).map(|i| v.visual[i * dataset.d_v + j] as f64).sum();
            out.push(s / n);
        }
        let audio = v.audio.as_ref().ok_or_else(|| EvalError::MissingAudio(v.id.clone()))?;
        for j in 0..dataset.d_a {
            let s: f64 = (0..v.n_clips).map(|i| audio[i * dataset.d_a + j] as f64).sum();
            out.push(s / n);
        }
    }
    Ok((out, dataset.videos.len(), d))
}

pub fn metrics_csv(summary: &MetricSummary) -> String {
    format!(
        "map,top5_map,hit_at_1,mean_l_pri,n_videos,skipped\n{},{},{},{},{},{}\n",
        summary.map, summary.top5_map, summary.hit_at_1, summary.mean_l_pri, summary.n_videos, summary.skipped
    )
}
