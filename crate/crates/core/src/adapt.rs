//! Per-instance test-time adaptation: the hallucination-loss strategy, the
//! entropy-minimization and confidence-pseudo-label baselines, and a
//! no-adaptation control. Every strategy works on a copy of the checkpoint;
//! the base parameters are never mutated, and the adaptation path never
//! reads ground-truth targets.

use crate::data::{Dataset, FeatureSequence};
use crate::eval::{self, BinarizeRule, MetricSummary, VideoEval};
use crate::losses::{self, LossError};
use crate::model::{forward_on_tape, grads_by_name, ParamStore, Partition};
use crate::numerics::Tape;
use crate::training::{self, TrainError};
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("invalid strategy config: {0}")]
    BadStrategy(String),
    #[error("empty split")]
    EmptySplit,
    #[error("video {0} has no targets; evaluation needs labels")]
    Unlabeled(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

pub type Result<T> = std::result::Result<T, AdaptError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdaptStrategy {
    /// Inner aux-loss adaptation of the shared+aux partitions; prediction
    /// uses the adapted shared parameters with the base primary ones.
    Hallucination { lambda: f64, k: usize },
    /// SGD on the mean binary prediction entropy, shared partition only.
    Entropy { lambda: f64, k: usize },
    /// Self-training rounds on confident clips, shared+primary partitions.
    PseudoLabel {
        lambda: f64,
        k: usize,
        tau_lo: f64,
        tau_hi: f64,
    },
    None,
}

impl AdaptStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AdaptStrategy::PseudoLabel { tau_lo, tau_hi, k, .. } => {
                if tau_lo >= tau_hi {
                    return Err(AdaptError::BadStrategy(format!(
                        "tau_lo {tau_lo} must be < tau_hi {tau_hi}"
                    )));
                }
                if k < 1 {
                    return Err(AdaptError::BadStrategy("k must be >= 1".into()));
                }
                Ok(())
            }
            AdaptStrategy::Hallucination { k, .. } | AdaptStrategy::Entropy { k, .. } => {
                if k < 1 {
                    return Err(AdaptError::BadStrategy("k must be >= 1".into()));
                }
                Ok(())
            }
            AdaptStrategy::None => Ok(()),
        }
    }

}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptationReport {
    pub id: String,
    /// Aux/surrogate loss across the inner steps, length K+1.
    pub losses: Vec<f64>,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub millis: f64,
    /// False when the strategy could not run (e.g. no audio for the
    /// hallucination loss); predictions are then the unadapted forward.
    pub adapted: bool,
    /// Pseudo-label rounds that found no confident clip and applied no update.
    pub no_confident_rounds: Vec<usize>,
}

fn plain_scores(store: &ParamStore, video: &FeatureSequence) -> Result<Vec<f64>> {
    let trace = crate::model::forward(store, video, !video.has_audio())?;
    Ok(trace.scores)
}

/// Mean binary entropy of the scores, on the tape.
fn entropy_loss_on_tape(tape: &mut Tape, h: crate::numerics::Var) -> Result<crate::numerics::Var> {
    let (n, _) = tape.shape(h);
    let ones = tape.constant(n, 1, vec![1.0; n]);
    let ln_h = tape.ln(h);
    let omh = tape.sub(ones, h)?;
    let ln_omh = tape.ln(omh);
    let t1 = tape.mul(h, ln_h)?;
    let t2 = tape.mul(omh, ln_omh)?;
    let s = tape.add(t1, t2)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Adapts a copy of `store` to one unlabeled video and predicts with it.
/// The entry state of `store` is never modified.
pub fn adapt_and_predict(
    store: &ParamStore,
    video: &FeatureSequence,
    strategy: &AdaptStrategy,
) -> Result<(Vec<f64>, AdaptationReport)> {
    strategy.validate()?;
    // adaptation is label-free by construction: targets are stripped here
    let video = FeatureSequence {
        targets: None,
        ..video.clone()
    };
    let start = Instant::now();

    let pre = plain_scores(store, &video)?;
    let mut no_confident_rounds = Vec::new();
    let (post, losses, adapted) = match *strategy {
        AdaptStrategy::None => {
            let l0 = if video.has_audio() {
                let mut tape = Tape::new();
                let trace = forward_on_tape(&mut tape, store, &video, false)?;
                let (_, _, l_aux) = losses::aux_loss_on_tape(&mut tape, &trace)?;
                tape.value(l_aux)[0]
            } else {
                0.0
            };
            (pre.clone(), vec![l0], false)
        }
        AdaptStrategy::Hallucination { lambda, k } => {
            if !video.has_audio() {
                // no audio stream, no hallucination loss to adapt on
                (pre.clone(), vec![0.0; k + 1], false)
            } else {
                let (adapted_params, traj) = training::inner_adapt(store, &video, lambda, k)?;
                // prediction uses adapted shared + base primary parameters
                let mut pred_params = store.clone();
                pred_params
                    .copy_partitions_from(&adapted_params, &[Partition::Shared, Partition::Aux]);
                let post = plain_scores(&pred_params, &video)?;
                (post, traj, true)
            }
        }
        AdaptStrategy::Entropy { lambda, k } => {
            let mut params = store.clone();
            let names = params.names_in(&[Partition::Shared]);
            let missing = !video.has_audio();
            let mut traj = Vec::with_capacity(k + 1);
            for _ in 0..k {
                let mut tape = Tape::new();
                let trace = forward_on_tape(&mut tape, &params, &video, missing)?;
                let loss = entropy_loss_on_tape(&mut tape, trace.scores)?;
                traj.push(tape.value(loss)[0]);
                let grads = tape.backward(loss)?;
                let gm = grads_by_name(&grads, &trace.param_vars, &params);
                training::sgd_step(&mut params, &names, &gm, lambda)?;
            }
            let mut tape = Tape::new();
            let trace = forward_on_tape(&mut tape, &params, &video, missing)?;
            let loss = entropy_loss_on_tape(&mut tape, trace.scores)?;
            traj.push(tape.value(loss)[0]);
            let post = plain_scores(&params, &video)?;
            (post, traj, true)
        }
        AdaptStrategy::PseudoLabel { lambda, k, tau_lo, tau_hi } => {
            let mut params = store.clone();
            let names = params.names_in(&[Partition::Shared, Partition::Primary]);
            let missing = !video.has_audio();
            let mut traj = Vec::with_capacity(k + 1);
            let mut last_loss = 0.0;
            for round in 0..k {
                let mut tape = Tape::new();
                let trace = forward_on_tape(&mut tape, &params, &video, missing)?;
                let h = tape.value(trace.scores).to_vec();
                let confident: Vec<(usize, f64)> = h
                    .iter()
                    .enumerate()
                    .filter_map(|(i, &hi)| {
                        if hi >= tau_hi {
                            Some((i, 1.0))
                        } else if hi <= tau_lo {
                            Some((i, 0.0))
                        } else {
                            None
                        }
                    })
                    .collect();
                if confident.is_empty() {
                    no_confident_rounds.push(round);
                    traj.push(last_loss);
                    continue;
                }
                // BCE restricted to the confident clips: selection matrix
                // applied via per-clip masking weights
                let n = h.len();
                let mut mask = vec![0.0; n];
                let mut labels = vec![0.0; n];
                for &(i, y) in &confident {
                    mask[i] = 1.0;
                    labels[i] = y;
                }
                let y = tape.constant(n, 1, labels);
                let ones = tape.constant(n, 1, vec![1.0; n]);
                let ln_h = tape.ln(trace.scores);
                let omh = tape.sub(ones, trace.scores)?;
                let ln_omh = tape.ln(omh);
                let omy = tape.sub(ones, y)?;
                let t1 = tape.mul(y, ln_h)?;
                let t2 = tape.mul(omy, ln_omh)?;
                let s = tape.add(t1, t2)?;
                let m = tape.constant(n, 1, mask);
                let masked = tape.mul(s, m)?;
                let total = tape.sum(masked);
                let loss = tape.scale(total, -1.0 / confident.len() as f64);
                last_loss = tape.value(loss)[0];
                traj.push(last_loss);
                let grads = tape.backward(loss)?;
                let gm = grads_by_name(&grads, &trace.param_vars, &params);
                training::sgd_step(&mut params, &names, &gm, lambda)?;
            }
            traj.push(last_loss);
            let post = plain_scores(&params, &video)?;
            (post, traj, true)
        }
    };
    let report = AdaptationReport {
        id: video.id.clone(),
        losses,
        pre,
        post: post.clone(),
        millis: start.elapsed().as_secs_f64() * 1e3,
        adapted,
        no_confident_rounds,
    };
    Ok((post, report))
}

/// Adapts and scores every video independently from the same base
/// parameters, then aggregates metrics over the split.
pub fn evaluate_split(
    store: &ParamStore,
    dataset: &Dataset,
    strategy: &AdaptStrategy,
    rule: BinarizeRule,
) -> Result<(MetricSummary, Vec<AdaptationReport>)> {
    if dataset.videos.is_empty() {
        return Err(AdaptError::EmptySplit);
    }
    let mut evals = Vec::with_capacity(dataset.videos.len());
    let mut reports = Vec::with_capacity(dataset.videos.len());
    let mut loss_acc = 0.0;
    for video in &dataset.videos {
        let targets = video
            .targets_f64()
            .ok_or_else(|| AdaptError::Unlabeled(video.id.clone()))?;
        let (scores, report) = adapt_and_predict(store, video, strategy)?;
        loss_acc += losses::bce(&scores, &targets)?;
        evals.push(VideoEval {
            scores,
            positives: eval::binarize_targets(&targets, rule),
        });
        reports.push(report);
    }
    let skipped = evals.iter().filter(|v| !v.positives.iter().any(|&p| p)).count();
    let summary = MetricSummary {
        map: eval::map(&evals)?,
        top5_map: eval::top5_map(&evals)?,
        hit_at_1: eval::hit_at_1(&evals)?,
        mean_l_pri: loss_acc / dataset.videos.len() as f64,
        n_videos: dataset.videos.len(),
        skipped,
    };
    Ok((summary, reports))
}

/// One JSON object per video: id, losses[], pre[], post[], millis.
pub fn reports_jsonl(reports: &[AdaptationReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).expect("report serializes"));
        out.push('\n');
    }
    out
}
