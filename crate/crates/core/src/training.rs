//! Optimizers, joint training, and the two-loop meta-auxiliary training.
//!
//! Update discipline: inner/aux updates touch exactly the shared and aux
//! partitions; outer updates touch exactly the shared and primary partitions.
//! The outer gradient is first-order: the gradient taken at the adapted
//! shared parameters is applied to the base shared parameters directly.

use crate::data::{Dataset, FeatureSequence};
use crate::losses::{self, LossBundle, LossError};
use crate::model::{forward_on_tape, grads_by_name, GradMap, ParamStore, Partition};
use crate::numerics::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("inner_steps must be >= 1, got {0}")]
    BadInnerSteps(usize),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptKind {
    Sgd,
    Adam,
}

/// How Alg.-line-7 aux updates are committed during meta training:
/// sequentially per video, or once per batch with the mean update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Line7Mode {
    Sequential,
    BatchMean,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub joint_epochs: usize,
    pub meta_epochs: usize,
    pub outer_optimizer: OptKind,
    pub line7_mode: Line7Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 1e-1,
            meta_lr: 5e-5,
            inner_steps: 3,
            batch_size: 1,
            joint_epochs: 200,
            meta_epochs: 20,
            outer_optimizer: OptKind::Adam,
            line7_mode: Line7Mode::Sequential,
            seed: 0,
        }
    }
}

/// Plain SGD: p <- p - lr * g over the named subset.
pub fn sgd_step(store: &mut ParamStore, names: &[String], grads: &GradMap, lr: f64) -> Result<()> {
    for name in names {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
        let p = store.get_mut(name);
        for (w, gi) in p.data.iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

/// Adam with bias correction. Moments are keyed by parameter name and created
/// lazily; the step counter increments once per `apply`.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: std::collections::BTreeMap<String, Vec<f64>>,
    v: std::collections::BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Default::default(),
            v: Default::default(),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, names: &[String], grads: &GradMap) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for name in names {
            let g = grads
                .get(name)
                .ok_or_else(|| TrainError::MissingGradient(name.clone()))?;
            let p = store.get_mut(name);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One optimizer behind either update rule.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        match kind {
            OptKind::Sgd => Optimizer::Sgd { lr },
            OptKind::Adam => Optimizer::Adam(AdamState::new(lr)),
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore, names: &[String], grads: &GradMap) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(store, names, grads, *lr),
            Optimizer::Adam(a) => a.apply(store, names, grads),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_pri: f64,
    pub l_aux: f64,
    pub l_joint: f64,
}

fn mean_bundles(bundles: &[LossBundle], epoch: usize) -> EpochLosses {
    let n = bundles.len().max(1) as f64;
    EpochLosses {
        epoch,
        l_pri: bundles.iter().map(|b| b.l_pri).sum::<f64>() / n,
        l_aux: bundles.iter().map(|b| b.l_aux).sum::<f64>() / n,
        l_joint: bundles.iter().map(|b| b.l_joint).sum::<f64>() / n,
    }
}

fn add_grads(acc: &mut GradMap, g: &GradMap, names: &[String]) {
    for name in names {
        let src = &g[name];
        let dst = acc.entry(name.clone()).or_insert_with(|| vec![0.0; src.len()]);
        for (d, s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn scale_grads(acc: &mut GradMap, c: f64) {
    for g in acc.values_mut() {
        for x in g.iter_mut() {
            *x *= c;
        }
    }
}

/// Joint training on L_pri + L_aux: seeded shuffled mini-batches, one Adam
/// step per batch over all partitions.
pub fn train_joint(store: &mut ParamStore, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLosses>> {
    if dataset.videos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let all_names: Vec<String> =
        store.names_in(&[Partition::Shared, Partition::Primary, Partition::Aux]);
    let mut opt = AdamState::new(cfg.meta_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x101));
    let mut history = Vec::with_capacity(cfg.joint_epochs);
    for epoch in 0..cfg.joint_epochs {
        let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
        order.shuffle(&mut rng);
        let mut bundles = Vec::with_capacity(dataset.videos.len());
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut acc = GradMap::new();
            for &vi in batch {
                let (bundle, grads) = losses::joint_loss(store, &dataset.videos[vi])?;
                add_grads(&mut acc, &grads, &all_names);
                bundles.push(bundle);
            }
            scale_grads(&mut acc, 1.0 / batch.len() as f64);
            opt.apply(store, &all_names, &acc)?;
        }
        history.push(mean_bundles(&bundles, epoch));
    }
    Ok(history)
}

/// Global-norm cap for inner/auxiliary gradient steps. Aux losses on far
/// out-of-distribution instances can be an order of magnitude larger than
/// on training data; without a cap the fixed inner step size overshoots.
pub const INNER_CLIP_NORM: f64 = 1.5;

/// Scales the named gradients so their joint L2 norm is at most `max_norm`.
fn clip_global_norm(grads: &mut GradMap, names: &[String], max_norm: f64) {
    let mut sq = 0.0;
    for name in names {
        if let Some(g) = grads.get(name) {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for name in names {
            if let Some(g) = grads.get_mut(name) {
                for x in g.iter_mut() {
                    *x *= s;
                }
            }
        }
    }
}

/// Parameters the inner/test-time adaptation may move: the full auxiliary
/// partition plus the per-stream input-alignment parameters (input bias and
/// skip projection) of the shared partition. Keeping the attention
/// projections fixed makes each inner step a well-conditioned linear
/// correction of the incoming features and avoids re-routing attention from
/// a handful of unlabeled gradients.
pub fn adaptable_names(store: &ParamStore) -> Vec<String> {
    let mut names = store.names_in(&[Partition::Shared, Partition::Aux]);
    names.sort();
    names
}

/// K SGD steps on L_aux over the shared and aux partitions, applied to a
/// copy. The primary partition is read but never written. The returned
/// trajectory has K+1 values; index 0 is the pre-adaptation loss.
pub fn inner_adapt(
    store: &ParamStore,
    video: &FeatureSequence,
    lambda: f64,
    k: usize,
) -> Result<(ParamStore, Vec<f64>)> {
    if k < 1 {
        return Err(TrainError::BadInnerSteps(k));
    }
    let mut adapted = store.clone();
    let names = adaptable_names(&adapted);
    let mut trajectory = Vec::with_capacity(k + 1);
    for _ in 0..k {
        let mut tape = Tape::new();
        let trace = forward_on_tape(&mut tape, &adapted, video, false)?;
        let (_, _, l_aux) = losses::aux_loss_on_tape(&mut tape, &trace)?;
        trajectory.push(tape.value(l_aux)[0]);
        let grads = tape.backward(l_aux)?;
        let mut gm = grads_by_name(&grads, &trace.param_vars, &adapted);
        clip_global_norm(&mut gm, &names, INNER_CLIP_NORM);
        sgd_step(&mut adapted, &names, &gm, lambda)?;
    }
    // final loss after the last step
    let mut tape = Tape::new();
    let trace = forward_on_tape(&mut tape, &adapted, video, false)?;
    let (_, _, l_aux) = losses::aux_loss_on_tape(&mut tape, &trace)?;
    trajectory.push(tape.value(l_aux)[0]);
    Ok((adapted, trajectory))
}

/// Gradient of L_pri at {adapted shared, base primary} parameters.
fn primary_grads_at(
    adapted: &ParamStore,
    video: &FeatureSequence,
) -> Result<(f64, GradMap)> {
    let targets = video
        .targets_f64()
        .ok_or_else(|| LossError::Unlabeled(video.id.clone()))?;
    let mut tape = Tape::new();
    let trace = forward_on_tape(&mut tape, adapted, video, false)?;
    let l_pri = losses::primary_loss_on_tape(&mut tape, trace.scores, &targets)?;
    let val = tape.value(l_pri)[0];
    let grads = tape.backward(l_pri)?;
    Ok((val, grads_by_name(&grads, &trace.param_vars, adapted)))
}

/// Checkpoints in the meta-training loop at which an observer can inspect
/// the live parameters, e.g. to audit which partitions each phase wrote.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaPhase {
    /// Before any update of the current batch.
    BatchStart,
    /// After the aux update of Alg. 1 line 7 was committed to the live
    /// parameters (once per video in sequential mode, once per batch in
    /// batch-mean mode).
    AuxCommitted,
    /// After the outer optimizer step for the batch.
    OuterStepped,
}

/// Meta-auxiliary training. Per batch: each video gets K inner aux steps to
/// produce adapted parameters; the same aux update is committed to the live
/// parameters (sequentially or batch-mean); primary-loss gradients taken at
/// the adapted parameters are summed and applied once per batch to the
/// shared and primary partitions with the outer optimizer.
pub fn train_meta(store: &mut ParamStore, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLosses>> {
    train_meta_observed(store, dataset, cfg, |_, _| {})
}

/// `train_meta` with a hook called at every [`MetaPhase`] boundary.
pub fn train_meta_observed(
    store: &mut ParamStore,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(MetaPhase, &ParamStore),
) -> Result<Vec<EpochLosses>> {
    if dataset.videos.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.inner_steps < 1 {
        return Err(TrainError::BadInnerSteps(cfg.inner_steps));
    }
    let outer_names = store.names_in(&[Partition::Shared, Partition::Primary]);
    let aux_names = store.names_in(&[Partition::Shared, Partition::Aux]);
    let mut outer_opt = Optimizer::new(cfg.outer_optimizer, cfg.meta_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x202));
    let mut history = Vec::with_capacity(cfg.meta_epochs);
    for epoch in 0..cfg.meta_epochs {
        let mut order: Vec<usize> = (0..dataset.videos.len()).collect();
        order.shuffle(&mut rng);
        let mut pri_losses = Vec::new();
        let mut aux_losses = Vec::new();
        for batch in order.chunks(cfg.batch_size.max(1)) {
            observer(MetaPhase::BatchStart, store);
            let mut outer_acc = GradMap::new();
            // batch-mean mode: accumulated aux deltas, committed after the loop
            let mut aux_delta: Option<GradMap> = None;
            for &vi in batch {
                let video = &dataset.videos[vi];
                let (adapted, traj) = inner_adapt(store, video, cfg.inner_lr, cfg.inner_steps)?;
                aux_losses.push(*traj.last().unwrap());
                let (l_pri, grads) = primary_grads_at(&adapted, video)?;
                pri_losses.push(l_pri);
                // first-order outer gradient: grad at adapted shared params
                // accumulates onto the base shared params
                add_grads(&mut outer_acc, &grads, &outer_names);
                match cfg.line7_mode {
                    Line7Mode::Sequential => {
                        store.copy_partitions_from(&adapted, &[Partition::Shared, Partition::Aux]);
                        observer(MetaPhase::AuxCommitted, store);
                    }
                    Line7Mode::BatchMean => {
                        let delta = aux_delta.get_or_insert_with(GradMap::new);
                        for name in &aux_names {
                            let base = &store.get(name).data;
                            let new = &adapted.get(name).data;
                            let d = delta.entry(name.clone()).or_insert_with(|| vec![0.0; base.len()]);
                            for i in 0..base.len() {
                                d[i] += new[i] - base[i];
                            }
                        }
                    }
                }
            }
            if let Some(mut delta) = aux_delta {
                scale_grads(&mut delta, 1.0 / batch.len() as f64);
                for name in &aux_names {
                    let p = store.get_mut(name);
                    for (w, d) in p.data.iter_mut().zip(&delta[name]) {
                        *w += d;
                    }
                }
                observer(MetaPhase::AuxCommitted, store);
            }
            // Eq. 3 sums over the batch; no mean.
            outer_opt.apply(store, &outer_names, &outer_acc)?;
            observer(MetaPhase::OuterStepped, store);
        }
        let n_pri = pri_losses.len().max(1) as f64;
        let n_aux = aux_losses.len().max(1) as f64;
        let l_pri = pri_losses.iter().sum::<f64>() / n_pri;
        let l_aux = aux_losses.iter().sum::<f64>() / n_aux;
        history.push(EpochLosses {
            epoch,
            l_pri,
            l_aux,
            l_joint: l_pri + l_aux,
        });
    }
    Ok(history)
}

/// Writes a training history as CSV (epoch, l_pri, l_aux, l_joint).
pub fn history_csv(history: &[EpochLosses]) -> String {
    let mut out = String::from("epoch,l_pri,l_aux,l_joint\n");
    for h in history {
        out.push_str(&format!("{},{},{},{}\n", h.epoch, h.l_pri, h.l_aux, h.l_joint));
    }
    out
}
