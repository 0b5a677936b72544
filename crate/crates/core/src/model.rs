//! The audio-visual highlight network: two unimodal self-attention streams,
//! two cross-modal hallucination modules, two bimodal attention layers, and
//! a score regressor. Every parameter carries exactly one partition tag
//! (shared / primary / aux) which governs which loss may update it.

use crate::data::FeatureSequence;
use crate::numerics::{NumericsError, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("video {0} has no audio stream and missing-audio mode is off")]
    MissingAudio(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("checkpoint: bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    BadVersion(u32),
    #[error("checkpoint: truncated ({0})")]
    Truncated(String),
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Shared,
    Primary,
    Aux,
}

impl Partition {
    pub fn byte(self) -> u8 {
        match self {
            Partition::Shared => 0,
            Partition::Primary => 1,
            Partition::Aux => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Partition::Shared),
            1 => Ok(Partition::Primary),
            2 => Ok(Partition::Aux),
            _ => Err(ModelError::Malformed(format!("unknown partition byte {b}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_a: usize,
    pub d: usize,
    pub d_h: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_a: 12,
            d: 8,
            d_h: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub partition: Partition,
}

/// All learnable arrays, keyed by name. BTreeMap keeps every iteration in
/// sorted-name order, which fixes the update and serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub config: ModelConfig,
    params: BTreeMap<String, Param>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect()
}

impl ParamStore {
    /// Deterministic initialization: weights ~ uniform(-s, s) with
    /// s = sqrt(6/(fan_in+fan_out)), biases zero, combination logits zero.
    pub fn init(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = BTreeMap::new();
        let (d_v, d_a, d, d_h) = (config.d_v, config.d_a, config.d, config.d_h);
        let mut weight = |params: &mut BTreeMap<String, Param>, name: &str, rows, cols, part| {
            params.insert(
                name.to_string(),
                Param {
                    rows,
                    cols,
                    data: xavier(&mut rng, rows, cols),
                    partition: part,
                },
            );
        };
        let zeros = |params: &mut BTreeMap<String, Param>, name: &str, rows: usize, cols: usize, part| {
            params.insert(
                name.to_string(),
                Param {
                    rows,
                    cols,
                    data: vec![0.0; rows * cols],
                    partition: part,
                },
            );
        };
        // Unimodal self-attention (shared): learned skip projection since
        // input dims differ from d.
        for (stream, d_in) in [("sa_vv", d_v), ("sa_aa", d_a)] {
            for w in ["wq", "wk", "wv", "wskip"] {
                weight(&mut params, &format!("{stream}.{w}"), d_in, d, Partition::Shared);
            }
            // Input bias: lets adaptation cancel additive feature drift,
            // which the projection matrices alone cannot express.
            zeros(&mut params, &format!("{stream}.bin"), 1, d_in, Partition::Shared);
        }
        // Bimodal attention (primary): identity residual, no skip weights.
        for stream in ["bma_va", "bma_av"] {
            for w in ["wq", "wk", "wv"] {
                weight(&mut params, &format!("{stream}.{w}"), d, d, Partition::Primary);
            }
        }
        // Hallucination modules (aux): FC -> self-attention with bypass -> FC.
        for module in ["hal_va", "hal_av"] {
            weight(&mut params, &format!("{module}.fc1.w"), d, d_h, Partition::Aux);
            zeros(&mut params, &format!("{module}.fc1.b"), 1, d_h, Partition::Aux);
            for w in ["wq", "wk", "wv"] {
                weight(&mut params, &format!("{module}.sa.{w}"), d_h, d_h, Partition::Aux);
            }
            weight(&mut params, &format!("{module}.fc2.w"), d_h, d, Partition::Aux);
            zeros(&mut params, &format!("{module}.fc2.b"), 1, d, Partition::Aux);
        }
        // Score regressor (primary).
        zeros(&mut params, "sr.logits", 1, 4, Partition::Primary);
        weight(&mut params, "sr.fc1.w", d, d, Partition::Primary);
        zeros(&mut params, "sr.fc1.b", 1, d, Partition::Primary);
        weight(&mut params, "sr.fc2.w", d, 1, Partition::Primary);
        zeros(&mut params, "sr.fc2.b", 1, 1, Partition::Primary);
        Self { config, params }
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn names_in(&self, parts: &[Partition]) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| parts.contains(&p.partition))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Order-stable hash over the bit patterns of the named partitions.
    pub fn hash_partitions(&self, parts: &[Partition]) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in &self.params {
            if parts.contains(&p.partition) {
                name.hash(&mut h);
                for x in &p.data {
                    x.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    pub fn hash_all(&self) -> u64 {
        self.hash_partitions(&[Partition::Shared, Partition::Primary, Partition::Aux])
    }

    /// Copies the named partitions from `src` into `self`.
    pub fn copy_partitions_from(&mut self, src: &ParamStore, parts: &[Partition]) {
        for (name, p) in &src.params {
            if parts.contains(&p.partition) {
                self.params.get_mut(name).expect("same layout").data = p.data.clone();
            }
        }
    }

    // ------------------------------------------------------------------
    // Checkpoint format: magic "MTTA", version u32 LE, u32-length-prefixed
    // config JSON, then per parameter in sorted-name order:
    // u32 name_len, name, partition byte, u32 rows, u32 cols, f64 LE data.
    // ------------------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"MTTA")?;
        f.write_all(&1u32.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        f.write_all(&(cfg.len() as u32).to_le_bytes())?;
        f.write_all(&cfg)?;
        for (name, p) in &self.params {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&[p.partition.byte()])?;
            f.write_all(&(p.rows as u32).to_le_bytes())?;
            f.write_all(&(p.cols as u32).to_le_bytes())?;
            for x in &p.data {
                f.write_all(&x.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos;
        let take = |pos: &mut usize, len: usize, what: &str| -> Result<std::ops::Range<usize>> {
            let end = pos
                .checked_add(len)
                .ok_or_else(|| ModelError::Truncated(what.to_string()))?;
            if end > bytes.len() {
                return Err(ModelError::Truncated(what.to_string()));
            }
            let r = *pos..end;
            *pos = end;
            Ok(r)
        };
        let magic: [u8; 4] = bytes
            .get(0..4)
            .ok_or_else(|| ModelError::Truncated("magic".into()))?
            .try_into()
            .unwrap();
        pos = 4;
        if &magic != b"MTTA" {
            return Err(ModelError::BadMagic(magic));
        }
        let ver = u32::from_le_bytes(bytes[take(&mut pos, 4, "version")?].try_into().unwrap());
        if ver != 1 {
            return Err(ModelError::BadVersion(ver));
        }
        let clen = u32::from_le_bytes(bytes[take(&mut pos, 4, "config length")?].try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(&bytes[take(&mut pos, clen, "config")?])
            .map_err(|e| ModelError::Malformed(e.to_string()))?;
        let mut params = BTreeMap::new();
        while pos < bytes.len() {
            let nlen = u32::from_le_bytes(bytes[take(&mut pos, 4, "name length")?].try_into().unwrap()) as usize;
            let name = String::from_utf8(bytes[take(&mut pos, nlen, "name")?].to_vec())
                .map_err(|e| ModelError::Malformed(e.to_string()))?;
            let part = Partition::from_byte(bytes[take(&mut pos, 1, "partition")?][0]);
            let part = part?;
            let rows = u32::from_le_bytes(bytes[take(&mut pos, 4, "rows")?].try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(bytes[take(&mut pos, 4, "cols")?].try_into().unwrap()) as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| ModelError::Malformed(format!("{name}: shape overflow")))?;
            let dlen = count
                .checked_mul(8)
                .ok_or_else(|| ModelError::Malformed(format!("{name}: shape overflow")))?;
            let data: Vec<f64> = bytes[take(&mut pos, dlen, "param data")?]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Param { rows, cols, data, partition: part });
        }
        Ok(Self { config, params })
    }
}

/// Per-video activations from one forward pass, still on the tape.
pub struct TraceVars {
    pub v_v: Var,
    pub a_a: Var,
    pub hallucinated_audio: Option<Var>,
    pub hallucinated_visual: Option<Var>,
    pub v_a: Var,
    pub a_v: Var,
    pub scores: Var,
    /// Tape leaf for every parameter the pass touched.
    pub param_vars: BTreeMap<String, Var>,
}

/// Per-video activations as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub n_clips: usize,
    pub v_v: Vec<f64>,
    pub a_a: Vec<f64>,
    pub hallucinated_audio: Option<Vec<f64>>,
    pub hallucinated_visual: Option<Vec<f64>>,
    pub v_a: Vec<f64>,
    pub a_v: Vec<f64>,
    pub scores: Vec<f64>,
}

struct Binder<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    fn bind(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let p = self.store.get(name);
        let v = tape.leaf(p.rows, p.cols, p.data.clone());
        self.vars.insert(name.to_string(), v);
        v
    }
}

/// Scaled dot-product attention core: softmax((q Wq)(k Wk)^T / sqrt(d)) (k Wv).
/// Residuals are the caller's responsibility.
pub fn attention(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> crate::numerics::Result<Var> {
    let q = tape.matmul(query_src, wq)?;
    let k = tape.matmul(kv_src, wk)?;
    let v = tape.matmul(kv_src, wv)?;
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt)?;
    let d = tape.shape(q).1 as f64;
    let scaled = tape.scale(logits, 1.0 / d.sqrt());
    let attn = tape.softmax_rows(scaled)?;
    tape.matmul(attn, v)
}

/// Unimodal self-attention with a learned skip projection:
/// out = attention(x, x) + x W_skip.
pub fn self_attention(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wskip: Var,
) -> crate::numerics::Result<Var> {
    let att = attention(tape, x, x, wq, wk, wv)?;
    let skip = tape.matmul(x, wskip)?;
    tape.add(att, skip)
}

/// Bimodal attention with an identity residual on the query stream.
pub fn bimodal_attention(
    tape: &mut Tape,
    query_src: Var,
    kv_src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> crate::numerics::Result<Var> {
    let att = attention(tape, query_src, kv_src, wq, wk, wv)?;
    tape.add(att, query_src)
}

/// Hallucination module: FC1 -> relu -> (bypass + self-attention) -> FC2.
#[allow(clippy::too_many_arguments)]
pub fn hallucinate(
    tape: &mut Tape,
    src: Var,
    fc1_w: Var,
    fc1_b: Var,
    sa_wq: Var,
    sa_wk: Var,
    sa_wv: Var,
    fc2_w: Var,
    fc2_b: Var,
) -> crate::numerics::Result<Var> {
    let z0 = tape.matmul(src, fc1_w)?;
    let z1 = tape.add_row(z0, fc1_b)?;
    let z = tape.relu(z1);
    let att = attention(tape, z, z, sa_wq, sa_wk, sa_wv)?;
    let u = tape.add(z, att)?;
    let o = tape.matmul(u, fc2_w)?;
    tape.add_row(o, fc2_b)
}

/// Convex combination of the four streams followed by two FC layers and a
/// sigmoid, producing one score per clip.
pub fn score_regressor(
    tape: &mut Tape,
    streams: [Var; 4],
    logits: Var,
    fc1_w: Var,
    fc1_b: Var,
    fc2_w: Var,
    fc2_b: Var,
) -> crate::numerics::Result<Var> {
    let w = tape.softmax_rows(logits)?;
    let mut f: Option<Var> = None;
    for (i, s) in streams.iter().enumerate() {
        let wi = tape.index(w, 0, i);
        let term = tape.scale_var(*s, wi)?;
        f = Some(match f {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let f = f.unwrap();
    let h1 = tape.matmul(f, fc1_w)?;
    let h1b = tape.add_row(h1, fc1_b)?;
    let a1 = tape.relu(h1b);
    let h2 = tape.matmul(a1, fc2_w)?;
    let h2b = tape.add_row(h2, fc2_b)?;
    Ok(tape.sigmoid(h2b))
}

/// Full forward pass on a fresh region of `tape`.
///
/// Missing-audio mode skips the audio self-attention and substitutes a
/// detached copy of the hallucinated audio stream; the visual hallucination
/// is not computed.
pub fn forward_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    video: &FeatureSequence,
    missing_audio: bool,
) -> Result<TraceVars> {
    let cfg = &store.config;
    let n = video.n_clips;
    if video.visual.len() != n * cfg.d_v {
        return Err(ModelError::Dim(format!(
            "video {}: visual len {} != {}x{}",
            video.id,
            video.visual.len(),
            n,
            cfg.d_v
        )));
    }
    let mut binder = Binder {
        store,
        vars: BTreeMap::new(),
    };
    let visual = tape.constant(n, cfg.d_v, video.visual_f64());
    let b = &mut binder;
    let visual = {
        let bin = b.bind(tape, "sa_vv.bin");
        tape.add_row(visual, bin)?
    };
    let v_v = {
        let (wq, wk, wv, ws) = (
            b.bind(tape, "sa_vv.wq"),
            b.bind(tape, "sa_vv.wk"),
            b.bind(tape, "sa_vv.wv"),
            b.bind(tape, "sa_vv.wskip"),
        );
        self_attention(tape, visual, wq, wk, wv, ws)?
    };
    let hal = |tape: &mut Tape, b: &mut Binder, module: &str, src: Var| -> Result<Var> {
        let fc1_w = b.bind(tape, &format!("{module}.fc1.w"));
        let fc1_b = b.bind(tape, &format!("{module}.fc1.b"));
        let wq = b.bind(tape, &format!("{module}.sa.wq"));
        let wk = b.bind(tape, &format!("{module}.sa.wk"));
        let wv = b.bind(tape, &format!("{module}.sa.wv"));
        let fc2_w = b.bind(tape, &format!("{module}.fc2.w"));
        let fc2_b = b.bind(tape, &format!("{module}.fc2.b"));
        Ok(hallucinate(tape, src, fc1_w, fc1_b, wq, wk, wv, fc2_w, fc2_b)?)
    };
    let (a_a, hallucinated_audio, hallucinated_visual) = if missing_audio {
        let ha = hal(tape, b, "hal_va", v_v)?;
        let a_a = tape.detach(ha);
        (a_a, Some(ha), None)
    } else {
        let audio_data = video
            .audio_f64()
            .ok_or_else(|| ModelError::MissingAudio(video.id.clone()))?;
        if audio_data.len() != n * cfg.d_a {
            return Err(ModelError::Dim(format!(
                "video {}: audio len {} != {}x{}",
                video.id,
                audio_data.len(),
                n,
                cfg.d_a
            )));
        }
        let audio = tape.constant(n, cfg.d_a, audio_data);
        let audio = {
            let bin = b.bind(tape, "sa_aa.bin");
            tape.add_row(audio, bin)?
        };
        let a_a = {
            let (wq, wk, wv, ws) = (
                b.bind(tape, "sa_aa.wq"),
                b.bind(tape, "sa_aa.wk"),
                b.bind(tape, "sa_aa.wv"),
                b.bind(tape, "sa_aa.wskip"),
            );
            self_attention(tape, audio, wq, wk, wv, ws)?
        };
        let ha = hal(tape, b, "hal_va", v_v)?;
        let hv = hal(tape, b, "hal_av", a_a)?;
        (a_a, Some(ha), Some(hv))
    };
    let v_a = {
        let (wq, wk, wv) = (
            b.bind(tape, "bma_va.wq"),
            b.bind(tape, "bma_va.wk"),
            b.bind(tape, "bma_va.wv"),
        );
        bimodal_attention(tape, v_v, a_a, wq, wk, wv)?
    };
    let a_v = {
        let (wq, wk, wv) = (
            b.bind(tape, "bma_av.wq"),
            b.bind(tape, "bma_av.wk"),
            b.bind(tape, "bma_av.wv"),
        );
        bimodal_attention(tape, a_a, v_v, wq, wk, wv)?
    };
    let scores = {
        let logits = b.bind(tape, "sr.logits");
        let fc1_w = b.bind(tape, "sr.fc1.w");
        let fc1_b = b.bind(tape, "sr.fc1.b");
        let fc2_w = b.bind(tape, "sr.fc2.w");
        let fc2_b = b.bind(tape, "sr.fc2.b");
        score_regressor(tape, [v_v, v_a, a_a, a_v], logits, fc1_w, fc1_b, fc2_w, fc2_b)?
    };
    Ok(TraceVars {
        v_v,
        a_a,
        hallucinated_audio,
        hallucinated_visual,
        v_a,
        a_v,
        scores,
        param_vars: binder.vars,
    })
}

pub fn forward(store: &ParamStore, video: &FeatureSequence, missing_audio: bool) -> Result<ForwardTrace> {
    let mut tape = Tape::new();
    let tv = forward_on_tape(&mut tape, store, video, missing_audio)?;
    Ok(ForwardTrace {
        n_clips: video.n_clips,
        v_v: tape.value(tv.v_v).to_vec(),
        a_a: tape.value(tv.a_a).to_vec(),
        hallucinated_audio: tv.hallucinated_audio.map(|v| tape.value(v).to_vec()),
        hallucinated_visual: tv.hallucinated_visual.map(|v| tape.value(v).to_vec()),
        v_a: tape.value(tv.v_a).to_vec(),
        a_v: tape.value(tv.a_v).to_vec(),
        scores: tape.value(tv.scores).to_vec(),
    })
}

/// Gradients keyed by parameter name; absent gradients are zero.
pub type GradMap = BTreeMap<String, Vec<f64>>;

pub fn grads_by_name(
    grads: &crate::numerics::Grads,
    param_vars: &BTreeMap<String, Var>,
    store: &ParamStore,
) -> GradMap {
    let mut out = GradMap::new();
    for name in store.names() {
        let p = store.get(name);
        let g = match param_vars.get(name) {
            Some(v) => grads.get_or_zeros(*v, p.rows * p.cols),
            None => vec![0.0; p.rows * p.cols],
        };
        out.insert(name.clone(), g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::seq::SliceRandom;

    fn tiny_config() -> ModelConfig {
        ModelConfig { d_v: 4, d_a: 3, d: 4, d_h: 3, seed: 7 }
    }

    fn tiny_video(seed: u64, n: usize, d_v: usize, d_a: usize) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSequence {
            id: format!("t{seed}"),
            n_clips: n,
            visual: (0..n * d_v).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            audio: Some((0..n * d_a).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            targets: None,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ParamStore::init(ModelConfig::default());
        let b = ParamStore::init(ModelConfig::default());
        assert_eq!(a.hash_all(), b.hash_all());
        let c = ParamStore::init(ModelConfig { seed: 1, ..ModelConfig::default() });
        assert_ne!(a.hash_all(), c.hash_all());
    }

    #[test]
    fn partition_census() {
        let store = ParamStore::init(ModelConfig::default());
        let shared = store.names_in(&[Partition::Shared]);
        let primary = store.names_in(&[Partition::Primary]);
        let aux = store.names_in(&[Partition::Aux]);
        // Two self-attention streams, each 4 weights + 1 input bias.
        assert_eq!(shared.len(), 10);
        assert!(shared.iter().all(|n| n.starts_with("sa_vv") || n.starts_with("sa_aa")));
        // Two bimodal streams x 3 weights + regressor (logits, 2 FC layers).
        assert_eq!(primary.len(), 6 + 5);
        assert!(primary.iter().all(|n| n.starts_with("bma_") || n.starts_with("sr.")));
        // Two hallucination modules x (2 FC layers with bias + 3 SA weights).
        assert_eq!(aux.len(), 14);
        assert!(aux.iter().all(|n| n.starts_with("hal_")));
        let total: usize = shared.len() + primary.len() + aux.len();
        assert_eq!(store.names().count(), total);
    }

    #[test]
    fn init_bias_zero_weight_range() {
        let store = ParamStore::init(ModelConfig::default());
        assert!(store.get("sr.logits").data.iter().all(|&x| x == 0.0));
        assert!(store.get("sa_vv.bin").data.iter().all(|&x| x == 0.0));
        assert!(store.get("hal_va.fc1.b").data.iter().all(|&x| x == 0.0));
        let w = store.get("sa_vv.wq");
        let s = (6.0 / (w.rows + w.cols) as f64).sqrt();
        assert!(w.data.iter().all(|&x| x.abs() < s));
        assert!(w.data.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let store = ParamStore::init(ModelConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtta");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(store, loaded);
        assert_eq!(store.hash_all(), loaded.hash_all());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let store = ParamStore::init(tiny_config());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtta");
        store.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            ParamStore::from_bytes(&bytes[..bytes.len() - 3]),
            Err(ModelError::Truncated(_))
        ));
        bytes[0] = b'X';
        assert!(matches!(ParamStore::from_bytes(&bytes), Err(ModelError::BadMagic(_))));
        assert!(matches!(ParamStore::from_bytes(&[]), Err(ModelError::Truncated(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let store = ParamStore::init(tiny_config());
        let video = tiny_video(3, 5, 4, 3);
        let a = forward(&store, &video, false).unwrap();
        let b = forward(&store, &video, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_clip_self_attention_is_linear() {
        // With one clip the softmax is the scalar 1, so the layer reduces to
        // x (Wv + Wskip).
        let mut tape = Tape::new();
        let x = tape.leaf(1, 3, vec![0.3, -0.7, 1.1]);
        let wq = tape.leaf(3, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let wk = tape.leaf(3, 2, vec![0.7, -0.1, 0.2, 0.3, -0.4, 0.5]);
        let wv = tape.leaf(3, 2, vec![1.0, 0.5, -0.5, 0.25, 0.125, 2.0]);
        let ws = tape.leaf(3, 2, vec![0.2, -0.2, 0.4, 0.1, -0.3, 0.6]);
        let out = self_attention(&mut tape, x, wq, wk, wv, ws).unwrap();
        let got = tape.value(out);
        let xv = [0.3, -0.7, 1.1];
        let wvv = [[1.0, 0.5], [-0.5, 0.25], [0.125, 2.0]];
        let wss = [[0.2, -0.2], [0.4, 0.1], [-0.3, 0.6]];
        for j in 0..2 {
            let want: f64 = (0..3).map(|i| xv[i] * (wvv[i][j] + wss[i][j])).sum();
            assert!((got[j] - want).abs() < 1e-12, "col {j}: {} vs {want}", got[j]);
        }
    }

    #[test]
    fn two_clip_attention_matches_hand_softmax() {
        // Identity projections, d = 2: logits = x x^T / sqrt(2).
        let mut tape = Tape::new();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let x = tape.leaf(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let wq = tape.leaf(2, 2, eye.clone());
        let wk = tape.leaf(2, 2, eye.clone());
        let wv = tape.leaf(2, 2, eye);
        let out = attention(&mut tape, x, x, wq, wk, wv).unwrap();
        let got = tape.value(out);
        let s = 1.0 / 2.0f64.sqrt();
        let p = s.exp() / (s.exp() + 1.0); // diagonal attention weight
        let q = 1.0 - p;
        let want = [p, q, q, p];
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let store = ParamStore::init(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..100 {
            let n = rng.gen_range(2..8);
            let video = tiny_video(1000 + case, n, 4, 3);
            let base = forward(&store, &video, false).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted = FeatureSequence {
                id: video.id.clone(),
                n_clips: n,
                visual: perm.iter().flat_map(|&i| video.visual[i * 4..(i + 1) * 4].to_vec()).collect(),
                audio: video.audio.as_ref().map(|a| {
                    perm.iter().flat_map(|&i| a[i * 3..(i + 1) * 3].to_vec()).collect()
                }),
                targets: None,
            };
            let out = forward(&store, &permuted, false).unwrap();
            for (pos, &src) in perm.iter().enumerate() {
                assert!(
                    (out.scores[pos] - base.scores[src]).abs() < 1e-9,
                    "case {case}: score moved under permutation"
                );
            }
        }
    }

    #[test]
    fn missing_audio_never_reads_audio() {
        let store = ParamStore::init(tiny_config());
        let mut video = tiny_video(5, 6, 4, 3);
        let clean = forward(&store, &video, true).unwrap();
        // Poison the audio buffer; missing-audio mode must not look at it.
        video.audio = Some(vec![f32::NAN; 6 * 3]);
        let poisoned = forward(&store, &video, true).unwrap();
        assert_eq!(clean, poisoned);
        assert!(poisoned.scores.iter().all(|s| s.is_finite()));
        video.audio = None;
        let absent = forward(&store, &video, true).unwrap();
        assert_eq!(clean, absent);
    }

    #[test]
    fn missing_audio_substitutes_detached_hallucination() {
        let store = ParamStore::init(tiny_config());
        let video = tiny_video(8, 4, 4, 3);
        let tr = forward(&store, &video, true).unwrap();
        assert_eq!(tr.a_a, tr.hallucinated_audio.clone().unwrap());
        assert!(tr.hallucinated_visual.is_none());
    }

    // Straight-line reimplementation of the forward pass with plain loops,
    // used as an independent oracle for the tape-based version.
    mod oracle {
        pub fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
            let mut out = vec![0.0; n * k];
            for i in 0..n {
                for j in 0..k {
                    out[i * k + j] = (0..m).map(|l| a[i * m + l] * b[l * k + j]).sum();
                }
            }
            out
        }

        pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        }

        pub fn add_row(a: &[f64], bias: &[f64], n: usize, d: usize) -> Vec<f64> {
            let mut out = a.to_vec();
            for i in 0..n {
                for j in 0..d {
                    out[i * d + j] += bias[j];
                }
            }
            out
        }

        pub fn softmax_rows(a: &[f64], n: usize, d: usize) -> Vec<f64> {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                let row = &a[i * d..(i + 1) * d];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..d {
                    out[i * d + j] = exps[j] / z;
                }
            }
            out
        }

        pub fn attention(x_q: &[f64], x_kv: &[f64], wq: &[f64], wk: &[f64], wv: &[f64],
                         n: usize, m_q: usize, m_kv: usize, d: usize) -> Vec<f64> {
            let q = matmul(x_q, wq, n, m_q, d);
            let k = matmul(x_kv, wk, n, m_kv, d);
            let v = matmul(x_kv, wv, n, m_kv, d);
            let mut logits = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    logits[i * n + j] =
                        (0..d).map(|l| q[i * d + l] * k[j * d + l]).sum::<f64>() / (d as f64).sqrt();
                }
            }
            let attn = softmax_rows(&logits, n, n);
            matmul(&attn, &v, n, n, d)
        }

        pub fn relu(a: &[f64]) -> Vec<f64> {
            a.iter().map(|&x| x.max(0.0)).collect()
        }

        pub fn sigmoid(a: &[f64]) -> Vec<f64> {
            a.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let cfg = tiny_config();
        let store = ParamStore::init(cfg);
        let n = 3;
        let video = tiny_video(42, n, cfg.d_v, cfg.d_a);
        let got = forward(&store, &video, false).unwrap();

        let p = |name: &str| store.get(name).data.clone();
        let (d_v, d_a, d, d_h) = (cfg.d_v, cfg.d_a, cfg.d, cfg.d_h);
        let visual = oracle::add_row(&video.visual_f64(), &p("sa_vv.bin"), n, d_v);
        let v_v = oracle::add(
            &oracle::attention(&visual, &visual, &p("sa_vv.wq"), &p("sa_vv.wk"), &p("sa_vv.wv"), n, d_v, d_v, d),
            &oracle::matmul(&visual, &p("sa_vv.wskip"), n, d_v, d),
        );
        let audio = oracle::add_row(&video.audio_f64().unwrap(), &p("sa_aa.bin"), n, d_a);
        let a_a = oracle::add(
            &oracle::attention(&audio, &audio, &p("sa_aa.wq"), &p("sa_aa.wk"), &p("sa_aa.wv"), n, d_a, d_a, d),
            &oracle::matmul(&audio, &p("sa_aa.wskip"), n, d_a, d),
        );
        let hal = |module: &str, src: &[f64]| -> Vec<f64> {
            let z0 = oracle::add_row(
                &oracle::matmul(src, &p(&format!("{module}.fc1.w")), n, d, d_h),
                &p(&format!("{module}.fc1.b")), n, d_h,
            );
            let z = oracle::relu(&z0);
            let att = oracle::attention(
                &z, &z,
                &p(&format!("{module}.sa.wq")), &p(&format!("{module}.sa.wk")), &p(&format!("{module}.sa.wv")),
                n, d_h, d_h, d_h,
            );
            let u = oracle::add(&z, &att);
            oracle::add_row(
                &oracle::matmul(&u, &p(&format!("{module}.fc2.w")), n, d_h, d),
                &p(&format!("{module}.fc2.b")), n, d,
            )
        };
        let ha = hal("hal_va", &v_v);
        let hv = hal("hal_av", &a_a);
        let v_a = oracle::add(
            &oracle::attention(&v_v, &a_a, &p("bma_va.wq"), &p("bma_va.wk"), &p("bma_va.wv"), n, d, d, d),
            &v_v,
        );
        let a_v = oracle::add(
            &oracle::attention(&a_a, &v_v, &p("bma_av.wq"), &p("bma_av.wk"), &p("bma_av.wv"), n, d, d, d),
            &a_a,
        );
        let w = oracle::softmax_rows(&p("sr.logits"), 1, 4);
        let mut f = vec![0.0; n * d];
        for (wi, s) in w.iter().zip([&v_v, &v_a, &a_a, &a_v]) {
            for (fo, si) in f.iter_mut().zip(s.iter()) {
                *fo += wi * si;
            }
        }
        let h1 = oracle::relu(&oracle::add_row(&oracle::matmul(&f, &p("sr.fc1.w"), n, d, d), &p("sr.fc1.b"), n, d));
        let scores = oracle::sigmoid(&oracle::add_row(&oracle::matmul(&h1, &p("sr.fc2.w"), n, d, 1), &p("sr.fc2.b"), n, 1));

        let close = |a: &[f64], b: &[f64], what: &str| {
            assert_eq!(a.len(), b.len(), "{what} length");
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{what}: {x} vs {y}");
            }
        };
        close(&got.v_v, &v_v, "v_v");
        close(&got.a_a, &a_a, "a_a");
        close(got.hallucinated_audio.as_ref().unwrap(), &ha, "hallucinated audio");
        close(got.hallucinated_visual.as_ref().unwrap(), &hv, "hallucinated visual");
        close(&got.v_a, &v_a, "v_a");
        close(&got.a_v, &a_v, "a_v");
        close(&got.scores, &scores, "scores");
    }

    #[test]
    fn copy_partitions_moves_only_named_partitions() {
        let mut dst = ParamStore::init(tiny_config());
        let src = ParamStore::init(ModelConfig { seed: 123, ..tiny_config() });
        let p_before = dst.hash_partitions(&[Partition::Primary]);
        dst.copy_partitions_from(&src, &[Partition::Shared, Partition::Aux]);
        assert_eq!(dst.hash_partitions(&[Partition::Primary]), p_before);
        assert_eq!(
            dst.hash_partitions(&[Partition::Shared, Partition::Aux]),
            src.hash_partitions(&[Partition::Shared, Partition::Aux])
        );
    }
}
