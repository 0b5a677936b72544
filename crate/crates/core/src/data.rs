//! Feature containers, the AVHF binary file format, the synthetic
//! correlated audio-visual dataset generator, and test-set transforms.
//!
//! Features are stored as 32-bit floats (the on-disk precision) and widened
//! to 64-bit at the model boundary, so a write/read round trip is bit-exact.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: expected AVHF, got {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported AVHF version {0}")]
    BadVersion(u32),
    #[error("truncated AVHF payload: {0}")]
    Truncated(String),
    #[error("manifest parse error: {0}")]
    Manifest(String),
    #[error("dimension inconsistency: {0}")]
    DimInconsistency(String),
    #[error("degenerate config: {0}")]
    DegenerateConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One video: n clips of visual features, optional audio features, and
/// optional per-clip highlight targets in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub n_clips: usize,
    /// n x d_v, row-major.
    pub visual: Vec<f32>,
    /// n x d_a, row-major. Absent in missing-audio videos.
    pub audio: Option<Vec<f32>>,
    /// Length n, each in [0, 1].
    pub targets: Option<Vec<f32>>,
}

impl FeatureSequence {
    pub fn has_audio(&self) -> bool {
        self.audio.is_some()
    }

    pub fn visual_f64(&self) -> Vec<f64> {
        self.visual.iter().map(|&x| x as f64).collect()
    }

    pub fn audio_f64(&self) -> Option<Vec<f64>> {
        self.audio.as_ref().map(|a| a.iter().map(|&x| x as f64).collect())
    }

    pub fn targets_f64(&self) -> Option<Vec<f64>> {
        self.targets.as_ref().map(|t| t.iter().map(|&x| x as f64).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub videos: Vec<FeatureSequence>,
    pub split: String,
    pub d_v: usize,
    pub d_a: usize,
    /// Generator seed/params or source file, recorded for reproducibility.
    pub provenance: String,
}

impl Dataset {
    fn validate(&self) -> Result<()> {
        for v in &self.videos {
            if v.n_clips == 0 {
                return Err(DataError::DimInconsistency(format!("video {} has 0 clips", v.id)));
            }
            if v.visual.len() != v.n_clips * self.d_v {
                return Err(DataError::DimInconsistency(format!(
                    "video {}: visual len {} != {}x{}",
                    v.id,
                    v.visual.len(),
                    v.n_clips,
                    self.d_v
                )));
            }
            if let Some(a) = &v.audio {
                if a.len() != v.n_clips * self.d_a {
                    return Err(DataError::DimInconsistency(format!(
                        "video {}: audio len {} != {}x{}",
                        v.id,
                        a.len(),
                        v.n_clips,
                        self.d_a
                    )));
                }
            }
            if let Some(t) = &v.targets {
                if t.len() != v.n_clips {
                    return Err(DataError::DimInconsistency(format!(
                        "video {}: targets len {} != {}",
                        v.id,
                        t.len(),
                        v.n_clips
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Which feature streams a distribution shift is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftTarget {
    Audio,
    Visual,
    Both,
}

/// Affine shift: x -> ((1-blend)*I + blend*Q) x + b + noise, with Q a seeded
/// orthogonal matrix and b a seeded Gaussian bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub target: ShiftTarget,
    pub blend: f64,
    pub bias_scale: f64,
    pub noise_sigma: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        // Audio-only shift: leaves the visual stream clean so the
        // cross-modal hallucination task has something to repair.
        Self {
            target: ShiftTarget::Audio,
            blend: 0.6,
            bias_scale: 0.5,
            noise_sigma: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub clips_min: usize,
    pub clips_max: usize,
    pub d_z: usize,
    /// Leading latent dimensions that drive the highlight targets.
    pub target_dims: usize,
    /// Variance boost applied to the target-driving latent dimensions, so
    /// they dominate the feature covariance and any repair of a corrupted
    /// stream concentrates on them first.
    pub target_var_boost: f64,
    /// How strongly the visual stream reads the target-driving dimensions,
    /// relative to audio. Below 1.0 the model must rely on audio for
    /// ranking, so a corrupted audio stream costs real accuracy, while the
    /// visual stream still carries enough signal to guide repair.
    pub visual_target_gain: f64,
    pub d_v: usize,
    pub d_a: usize,
    pub rho: f64,
    pub sigma_v: f64,
    pub sigma_a: f64,
    /// Strength of the per-video audio nuisance, as a fraction of a quarter
    /// turn. Every video's audio passes through its own small random
    /// equal-angle rotation, so instances differ in a way the auxiliary task
    /// can detect and adapt away; without this heterogeneity the inner loop
    /// of meta-training has no per-instance work to do.
    pub nuisance_blend: f64,
    /// Scale of the per-video random audio bias, drawn alongside the
    /// nuisance rotation.
    pub nuisance_bias: f64,
    /// Fraction of videos whose nuisance is drawn at `nuisance_heavy_blend`
    /// instead of `nuisance_blend`, modelling the badly-recorded minority of
    /// a real corpus. These are the instances where test-time repair moves
    /// parameters far, so training on post-repair states sees that regime.
    #[serde(default)]
    pub nuisance_heavy_frac: f64,
    /// Rotation strength (fraction of a quarter turn) for the heavy minority.
    #[serde(default)]
    pub nuisance_heavy_blend: f64,
    pub highlight_q: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 120,
            n_test: 40,
            clips_min: 20,
            clips_max: 40,
            d_z: 6,
            target_dims: 2,
            target_var_boost: 2.0,
            visual_target_gain: 0.3,
            d_v: 16,
            d_a: 12,
            rho: 0.7,
            sigma_v: 0.1,
            sigma_a: 0.1,
            nuisance_blend: 0.2,
            nuisance_bias: 0.1,
            nuisance_heavy_frac: 0.0,
            nuisance_heavy_blend: 0.6,
            highlight_q: 0.25,
            shift: ShiftSpec::default(),
            seed: 0,
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Seeded orthogonal matrix via QR of a Gaussian matrix.
fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let g = nalgebra::DMatrix::from_fn(d, d, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        x
    });
    let q = g.qr().q();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = q[(i, j)];
        }
    }
    out
}

struct Mixing {
    m_v: Vec<f64>, // d_v x d_z
    m_a: Vec<f64>, // d_a x d_z
    w_star: Vec<f64>,
}

fn mixing_from_seed(cfg: &SynthConfig) -> Mixing {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let scale = 1.0 / (cfg.d_z as f64).sqrt();
    let mut m_v: Vec<f64> = gaussian_vec(&mut rng, cfg.d_v * cfg.d_z).iter().map(|x| x * scale).collect();
    let mut m_a: Vec<f64> = gaussian_vec(&mut rng, cfg.d_a * cfg.d_z).iter().map(|x| x * scale).collect();
    let mut w_star = gaussian_vec(&mut rng, cfg.d_z);
    let cut = cfg.target_dims.min(cfg.d_z);
    for c in 0..cfg.d_z {
        if c < cut {
            for r in 0..cfg.d_v {
                m_v[r * cfg.d_z + c] *= cfg.target_var_boost * cfg.visual_target_gain;
            }
            for r in 0..cfg.d_a {
                m_a[r * cfg.d_z + c] *= cfg.target_var_boost;
            }
        } else {
            // Targets depend only on the leading dimensions.
            w_star[c] = 0.0;
        }
    }
    Mixing { m_v, m_a, w_star }
}

fn gen_video(cfg: &SynthConfig, mix: &Mixing, id: &str, seed: u64) -> FeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.clips_min..=cfg.clips_max);
    let mut z = vec![0.0; cfg.d_z];
    for (i, zi) in gaussian_vec(&mut rng, cfg.d_z).iter().enumerate() {
        z[i] = *zi;
    }
    let mut visual = Vec::with_capacity(n * cfg.d_v);
    let mut audio = Vec::with_capacity(n * cfg.d_a);
    let mut latent_scores = Vec::with_capacity(n);
    for clip in 0..n {
        if clip > 0 {
            let eta = gaussian_vec(&mut rng, cfg.d_z);
            let carry = (1.0 - cfg.rho * cfg.rho).sqrt();
            for (zi, e) in z.iter_mut().zip(&eta) {
                *zi = cfg.rho * *zi + carry * e;
            }
        }
        for r in 0..cfg.d_v {
            let mut s = 0.0;
            for c in 0..cfg.d_z {
                s += mix.m_v[r * cfg.d_z + c] * z[c];
            }
            let eps: f64 = StandardNormal.sample(&mut rng);
            visual.push((s + cfg.sigma_v * eps) as f32);
        }
        for r in 0..cfg.d_a {
            let mut s = 0.0;
            for c in 0..cfg.d_z {
                s += mix.m_a[r * cfg.d_z + c] * z[c];
            }
            let eps: f64 = StandardNormal.sample(&mut rng);
            audio.push((s + cfg.sigma_a * eps) as f32);
        }
        latent_scores.push(z.iter().zip(&mix.w_star).map(|(a, b)| a * b).sum::<f64>());
    }
    if cfg.nuisance_blend > 0.0 || cfg.nuisance_bias > 0.0 {
        let blend = if cfg.nuisance_heavy_frac > 0.0 && rng.gen::<f64>() < cfg.nuisance_heavy_frac {
            cfg.nuisance_blend
                + rng.gen::<f64>() * (cfg.nuisance_heavy_blend - cfg.nuisance_blend)
        } else {
            cfg.nuisance_blend
        };
        let angle = blend * std::f64::consts::FRAC_PI_2;
        let rot = equal_angle_rotation(&mut rng, cfg.d_a, angle);
        let bias: Vec<f64> = gaussian_vec(&mut rng, cfg.d_a)
            .iter()
            .map(|x| x * cfg.nuisance_bias)
            .collect();
        for i in 0..n {
            let row: Vec<f64> = (0..cfg.d_a).map(|c| audio[i * cfg.d_a + c] as f64).collect();
            for r in 0..cfg.d_a {
                let mut s = bias[r];
                for c in 0..cfg.d_a {
                    s += rot[r * cfg.d_a + c] * row[c];
                }
                audio[i * cfg.d_a + r] = s as f32;
            }
        }
    }
    // top-q quantile within the video becomes the positive set, at least one
    // positive and one negative clip (AP needs both).
    let k = ((cfg.highlight_q * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        latent_scores[b]
            .partial_cmp(&latent_scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut targets = vec![0.0f32; n];
    for &idx in order.iter().take(k) {
        targets[idx] = 1.0;
    }
    FeatureSequence {
        id: id.to_string(),
        n_clips: n,
        visual,
        audio: Some(audio),
        targets: Some(targets),
    }
}

/// Equal-angle rotation: the columns of a random orthogonal basis are
/// paired into disjoint planes and every plane is rotated by the same
/// `angle`. Unlike a generic random rotation, no direction is left
/// near-fixed, so the corruption strength is homogeneous across draws
/// instead of depending on how the rotation happens to land on the
/// signal-bearing subspace. For odd dimensions one axis stays fixed.
fn equal_angle_rotation(rng: &mut ChaCha8Rng, d: usize, angle: f64) -> Vec<f64> {
    let u = orthogonal(rng, d);
    let (cs, sn) = (angle.cos(), angle.sin());
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        s[i * d + i] = 1.0;
    }
    for p in 0..d / 2 {
        let (a, b) = (2 * p, 2 * p + 1);
        // s += (cos-1)(uu' + vv') + sin (vu' - uv') for basis columns a, b
        for r in 0..d {
            for c in 0..d {
                let (ur, vr) = (u[r * d + a], u[r * d + b]);
                let (uc, vc) = (u[c * d + a], u[c * d + b]);
                s[r * d + c] += (cs - 1.0) * (ur * uc + vr * vc) + sn * (vr * uc - ur * vc);
            }
        }
    }
    s
}

fn apply_shift(dataset: &mut Dataset, spec: &ShiftSpec, seed: u64) {
    let mut setup_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA5A5));
    let build = |rng: &mut ChaCha8Rng, d: usize, spec: &ShiftSpec| {
        let s = equal_angle_rotation(rng, d, spec.blend * std::f64::consts::FRAC_PI_2);
        let b: Vec<f64> = gaussian_vec(rng, d).iter().map(|x| x * spec.bias_scale).collect();
        (s, b)
    };
    let audio_affine = build(&mut setup_rng, dataset.d_a, spec);
    let visual_affine = build(&mut setup_rng, dataset.d_v, spec);
    let shift_stream = |feat: &mut Vec<f32>, d: usize, aff: &(Vec<f64>, Vec<f64>), rng: &mut ChaCha8Rng| {
        let n = feat.len() / d;
        let mut out = vec![0.0f32; feat.len()];
        for i in 0..n {
            for r in 0..d {
                let mut s = 0.0;
                for c in 0..d {
                    s += aff.0[r * d + c] * feat[i * d + c] as f64;
                }
                let eps: f64 = StandardNormal.sample(rng);
                out[i * d + r] = (s + aff.1[r] + spec.noise_sigma * eps) as f32;
            }
        }
        *feat = out;
    };
    for (vi, video) in dataset.videos.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (vi as u64).wrapping_add(7919));
        if matches!(spec.target, ShiftTarget::Audio | ShiftTarget::Both) {
            if let Some(a) = &mut video.audio {
                shift_stream(a, dataset.d_a, &audio_affine, &mut rng);
            }
        }
        if matches!(spec.target, ShiftTarget::Visual | ShiftTarget::Both) {
            shift_stream(&mut video.visual, dataset.d_v, &visual_affine, &mut rng);
        }
    }
}

/// Generates (train, iid test, shifted test) splits from one latent-factor
/// model: AR(1) latents, linear mixing into each modality, targets from the
/// top-q quantile of a latent score within each video.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Dataset, Dataset)> {
    if cfg.rho < 0.0 || cfg.rho >= 1.0 {
        return Err(DataError::DegenerateConfig(format!("rho {} outside [0,1)", cfg.rho)));
    }
    if cfg.highlight_q <= 0.0 || cfg.highlight_q >= 1.0 {
        return Err(DataError::DegenerateConfig(format!("highlight_q {} outside (0,1)", cfg.highlight_q)));
    }
    if cfg.clips_min < 2 || cfg.clips_max < cfg.clips_min {
        return Err(DataError::DegenerateConfig("need clips_max >= clips_min >= 2".into()));
    }
    if cfg.d_z == 0 || cfg.d_v == 0 || cfg.d_a == 0 {
        return Err(DataError::DegenerateConfig("zero dimension".into()));
    }
    let mix = mixing_from_seed(cfg);
    let provenance = serde_json::to_string(cfg).expect("config serializes");
    let make = |split: &str, offset: u64, count: usize| -> Dataset {
        let videos = (0..count)
            .map(|i| {
                let vid_seed = cfg.seed ^ (offset + i as u64).wrapping_mul(0x2545F4914F6CDD1D);
                gen_video(cfg, &mix, &format!("{split}-{i:04}"), vid_seed)
            })
            .collect();
        Dataset {
            videos,
            split: split.to_string(),
            d_v: cfg.d_v,
            d_a: cfg.d_a,
            provenance: provenance.clone(),
        }
    };
    let train = make("train", 1_000_000, cfg.n_train);
    let test_iid = make("test-iid", 2_000_000, cfg.n_test);
    let mut test_shifted = make("test-shifted", 3_000_000, cfg.n_test);
    apply_shift(&mut test_shifted, &cfg.shift, cfg.seed.wrapping_add(0x5117));
    Ok((train, test_iid, test_shifted))
}

/// Adds independent N(0, sigma^2) noise to every feature entry. Targets are
/// untouched.
pub fn corrupt_gaussian(dataset: &Dataset, sigma: f64, seed: u64) -> Dataset {
    let mut out = dataset.clone();
    for (vi, video) in out.videos.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (vi as u64).wrapping_add(104729));
        for x in video.visual.iter_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *x = (*x as f64 + sigma * eps) as f32;
        }
        if let Some(a) = &mut video.audio {
            for x in a.iter_mut() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *x = (*x as f64 + sigma * eps) as f32;
            }
        }
    }
    out
}

fn rounded_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Removes the audio stream from a seeded round(fraction * N) subset of videos.
pub fn drop_audio(dataset: &Dataset, fraction: f64, seed: u64) -> Dataset {
    let mut out = dataset.clone();
    let k = rounded_count(fraction, out.videos.len());
    let mut idx: Vec<usize> = (0..out.videos.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    for &i in idx.iter().take(k) {
        out.videos[i].audio = None;
    }
    out
}

/// Removes a seeded round(fraction * N) subset of whole videos.
pub fn drop_train_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Dataset {
    let mut out = dataset.clone();
    let k = rounded_count(fraction, out.videos.len());
    let mut idx: Vec<usize> = (0..out.videos.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let drop: std::collections::HashSet<usize> = idx.into_iter().take(k).collect();
    out.videos = out
        .videos
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !drop.contains(i))
        .map(|(_, v)| v)
        .collect();
    out
}

// ---------------------------------------------------------------------------
// AVHF binary format
// ---------------------------------------------------------------------------

const AVHF_MAGIC: [u8; 4] = *b"AVHF";
const AVHF_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestVideo {
    id: String,
    n: usize,
    has_audio: bool,
    has_targets: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    d_v: usize,
    d_a: usize,
    split: String,
    provenance: String,
    videos: Vec<ManifestVideo>,
}

pub fn write_avhf(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let manifest = Manifest {
        d_v: dataset.d_v,
        d_a: dataset.d_a,
        split: dataset.split.clone(),
        provenance: dataset.provenance.clone(),
        videos: dataset
            .videos
            .iter()
            .map(|v| ManifestVideo {
                id: v.id.clone(),
                n: v.n_clips,
                has_audio: v.audio.is_some(),
                has_targets: v.targets.is_some(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&AVHF_MAGIC)?;
    f.write_all(&AVHF_VERSION.to_le_bytes())?;
    f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for v in &dataset.videos {
        write_f32s(&mut f, &v.visual)?;
        if let Some(a) = &v.audio {
            write_f32s(&mut f, a)?;
        }
        if let Some(t) = &v.targets {
            write_f32s(&mut f, t)?;
        }
    }
    f.flush()?;
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_avhf(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_avhf_bytes(&bytes)
}

pub fn read_avhf_bytes(bytes: &[u8]) -> Result<Dataset> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, len: usize, what: &str| -> Result<std::ops::Range<usize>> {
        let end = pos.checked_add(len).ok_or_else(|| DataError::Truncated(what.to_string()))?;
        if end > bytes.len() {
            return Err(DataError::Truncated(format!(
                "{what}: need {len} bytes at offset {pos}, file has {}",
                bytes.len()
            )));
        }
        let r = *pos..end;
        *pos = end;
        Ok(r)
    };
    let magic_r = take(&mut pos, 4, "magic")?;
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[magic_r]);
    if magic != AVHF_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let ver_r = take(&mut pos, 4, "version")?;
    let version = u32::from_le_bytes(bytes[ver_r].try_into().unwrap());
    if version != AVHF_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let mlen_r = take(&mut pos, 4, "manifest length")?;
    let mlen = u32::from_le_bytes(bytes[mlen_r].try_into().unwrap()) as usize;
    let man_r = take(&mut pos, mlen, "manifest")?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[man_r]).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.d_v == 0 || manifest.d_a == 0 {
        return Err(DataError::DimInconsistency("zero feature dimension in manifest".into()));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        if mv.n == 0 {
            return Err(DataError::DimInconsistency(format!("video {} declares 0 clips", mv.id)));
        }
        let nv = mv
            .n
            .checked_mul(manifest.d_v)
            .ok_or_else(|| DataError::DimInconsistency(format!("video {}: size overflow", mv.id)))?;
        let visual = read_f32s(bytes, &mut pos, nv, &format!("video {} visual", mv.id), &take)?;
        let audio = if mv.has_audio {
            let na = mv
                .n
                .checked_mul(manifest.d_a)
                .ok_or_else(|| DataError::DimInconsistency(format!("video {}: size overflow", mv.id)))?;
            Some(read_f32s(bytes, &mut pos, na, &format!("video {} audio", mv.id), &take)?)
        } else {
            None
        };
        let targets = if mv.has_targets {
            Some(read_f32s(bytes, &mut pos, mv.n, &format!("video {} targets", mv.id), &take)?)
        } else {
            None
        };
        videos.push(FeatureSequence {
            id: mv.id.clone(),
            n_clips: mv.n,
            visual,
            audio,
            targets,
        });
    }
    if pos != bytes.len() {
        return Err(DataError::Truncated(format!(
            "trailing bytes: payload ends at {pos}, file has {}",
            bytes.len()
        )));
    }
    let ds = Dataset {
        videos,
        split: manifest.split,
        d_v: manifest.d_v,
        d_a: manifest.d_a,
        provenance: manifest.provenance,
    };
    ds.validate()?;
    Ok(ds)
}

fn read_f32s(
    bytes: &[u8],
    pos: &mut usize,
    count: usize,
    what: &str,
    take: &dyn Fn(&mut usize, usize, &str) -> Result<std::ops::Range<usize>>,
) -> Result<Vec<f32>> {
    let len = count
        .checked_mul(4)
        .ok_or_else(|| DataError::Truncated(format!("{what}: size overflow")))?;
    let r = take(pos, len, what)?;
    Ok(bytes[r]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_train: 6,
            n_test: 4,
            clips_min: 8,
            clips_max: 12,
            seed: 42,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let cfg = small_cfg();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn synth_quantile_counts() {
        let cfg = SynthConfig {
            highlight_q: 0.2,
            clips_min: 10,
            clips_max: 10,
            n_train: 5,
            n_test: 2,
            seed: 7,
            ..SynthConfig::default()
        };
        let (train, _, _) = generate_synthetic(&cfg).unwrap();
        for v in &train.videos {
            let pos: usize = v.targets.as_ref().unwrap().iter().map(|&t| t as usize).sum();
            assert_eq!(pos, 2);
        }
    }

    #[test]
    fn synth_has_positive_and_negative_per_video() {
        let (train, iid, shifted) = generate_synthetic(&small_cfg()).unwrap();
        for ds in [&train, &iid, &shifted] {
            for v in &ds.videos {
                let t = v.targets.as_ref().unwrap();
                assert!(t.iter().any(|&x| x == 1.0));
                assert!(t.iter().any(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn noiseless_audio_is_linear_in_visual() {
        // sigma = 0: both modalities are exact linear maps of the latent, so
        // audio is (generically) an exact affine function of visual when
        // d_v >= d_z — the per-video nuisance adds a rotation (linear) and a
        // bias, hence the intercept column. Check via least squares residual.
        let cfg = SynthConfig {
            sigma_v: 0.0,
            sigma_a: 0.0,
            n_train: 2,
            n_test: 1,
            clips_min: 30,
            clips_max: 30,
            seed: 3,
            ..SynthConfig::default()
        };
        let (train, _, _) = generate_synthetic(&cfg).unwrap();
        let v = &train.videos[0];
        let n = v.n_clips;
        let vm = nalgebra::DMatrix::from_fn(n, cfg.d_v + 1, |i, j| {
            if j == cfg.d_v { 1.0 } else { v.visual[i * cfg.d_v + j] as f64 }
        });
        let am = nalgebra::DMatrix::from_fn(n, cfg.d_a, |i, j| v.audio.as_ref().unwrap()[i * cfg.d_a + j] as f64);
        let sol = vm.clone().svd(true, true).solve(&am, 1e-12).unwrap();
        let resid = (&vm * sol - am).norm();
        assert!(resid < 1e-4, "residual {resid}");
    }

    #[test]
    fn corrupt_gaussian_identity_and_stats() {
        let (train, _, _) = generate_synthetic(&small_cfg()).unwrap();
        let same = corrupt_gaussian(&train, 0.0, 9);
        assert_eq!(same, train);
        let big = SynthConfig {
            n_train: 20,
            clips_min: 40,
            clips_max: 40,
            d_v: 64,
            d_a: 64,
            seed: 11,
            ..SynthConfig::default()
        };
        let (t2, _, _) = generate_synthetic(&big).unwrap();
        let noised = corrupt_gaussian(&t2, 0.5, 13);
        let mut diffs = Vec::new();
        for (a, b) in t2.videos.iter().zip(&noised.videos) {
            for (x, y) in a.visual.iter().zip(&b.visual) {
                diffs.push((*y - *x) as f64);
            }
            assert_eq!(a.targets, b.targets);
        }
        assert!(diffs.len() > 50_000);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.5).abs() / 0.5 < 0.02, "std {std}");
    }

    #[test]
    fn drop_audio_counts() {
        let cfg = SynthConfig {
            n_train: 100,
            clips_min: 3,
            clips_max: 4,
            seed: 5,
            ..SynthConfig::default()
        };
        let (train, _, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(drop_audio(&train, 0.0, 1), train);
        let all = drop_audio(&train, 1.0, 1);
        assert!(all.videos.iter().all(|v| v.audio.is_none()));
        let quarter = drop_audio(&train, 0.25, 1);
        let dropped = quarter.videos.iter().filter(|v| v.audio.is_none()).count();
        assert_eq!(dropped, 25);
        // input untouched
        assert!(train.videos.iter().all(|v| v.audio.is_some()));
    }

    #[test]
    fn drop_train_fraction_counts() {
        let cfg = SynthConfig {
            n_train: 50,
            clips_min: 3,
            clips_max: 4,
            seed: 5,
            ..SynthConfig::default()
        };
        let (train, _, _) = generate_synthetic(&cfg).unwrap();
        assert_eq!(drop_train_fraction(&train, 0.0, 2), train);
        let d = drop_train_fraction(&train, 0.1, 2);
        assert_eq!(d.videos.len(), 45);
        let d2 = drop_train_fraction(&train, 0.1, 2);
        assert_eq!(d, d2);
    }

    #[test]
    fn avhf_round_trip() {
        let (train, _, _) = generate_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.avhf");
        write_avhf(&train, &path).unwrap();
        let back = read_avhf(&path).unwrap();
        assert_eq!(back, train);
    }

    #[test]
    fn avhf_rejects_bad_magic() {
        let (train, _, _) = generate_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.avhf");
        write_avhf(&train, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_avhf_bytes(&bytes), Err(DataError::BadMagic(_))));
    }

    #[test]
    fn avhf_rejects_truncation() {
        let (train, _, _) = generate_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.avhf");
        write_avhf(&train, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(read_avhf_bytes(cut).is_err());
    }

    #[test]
    fn avhf_fuzz_never_panics() {
        let (train, _, _) = generate_synthetic(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.avhf");
        write_avhf(&train, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let mut m = bytes.clone();
            let flips = rng.gen_range(1..8);
            for _ in 0..flips {
                let i = rng.gen_range(0..m.len());
                m[i] ^= 1 << rng.gen_range(0..8);
            }
            match read_avhf_bytes(&m) {
                Ok(ds) => {
                    // a mutation that survives parsing must still validate
                    ds.validate().unwrap();
                }
                Err(_) => {}
            }
        }
        // random truncations
        for _ in 0..200 {
            let cut = rng.gen_range(0..bytes.len());
            let _ = read_avhf_bytes(&bytes[..cut]);
        }
    }
}
