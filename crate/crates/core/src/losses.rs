//! Primary highlight loss (BCE), the two cross-modal hallucination losses
//! (MSE against detached targets), their sum, and the joint loss.

use crate::data::FeatureSequence;
use crate::model::{forward_on_tape, grads_by_name, GradMap, ModelError, ParamStore, TraceVars};
use crate::numerics::{NumericsError, Tape, Var};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: {0} scores vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("score {0} outside (0,1)")]
    ScoreRange(f64),
    #[error("trace is missing hallucinated streams")]
    MissingHallucination,
    #[error("video {0} has no ground-truth targets")]
    Unlabeled(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// All loss components from one forward pass.
///
/// The additive identities `l_aux = l_hal_av + l_hal_va` and
/// `l_joint = l_pri + l_aux` hold exactly: each sum is a single f64 add.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub l_pri: f64,
    pub l_hal_av: f64,
    pub l_hal_va: f64,
    pub l_aux: f64,
    pub l_joint: f64,
}

/// Mean binary cross-entropy on the tape. `h` must be n x 1 with entries in
/// (0,1); `h_gt` entries may be fractional in [0,1].
pub fn primary_loss_on_tape(tape: &mut Tape, h: Var, h_gt: &[f64]) -> Result<Var> {
    let (n, one) = tape.shape(h);
    if one != 1 || n != h_gt.len() {
        return Err(LossError::LengthMismatch(n * one, h_gt.len()));
    }
    for &v in tape.value(h) {
        if !(v > 0.0 && v < 1.0) {
            return Err(LossError::ScoreRange(v));
        }
    }
    let y = tape.constant(n, 1, h_gt.to_vec());
    let ones = tape.constant(n, 1, vec![1.0; n]);
    let ln_h = tape.ln(h);
    let one_minus_h = tape.sub(ones, h)?;
    let ln_omh = tape.ln(one_minus_h);
    let one_minus_y = tape.sub(ones, y)?;
    let t1 = tape.mul(y, ln_h)?;
    let t2 = tape.mul(one_minus_y, ln_omh)?;
    let s = tape.add(t1, t2)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Plain-value BCE, used for reporting.
pub fn bce(h: &[f64], h_gt: &[f64]) -> Result<f64> {
    if h.len() != h_gt.len() {
        return Err(LossError::LengthMismatch(h.len(), h_gt.len()));
    }
    let mut acc = 0.0;
    for (&p, &y) in h.iter().zip(h_gt) {
        if !(p > 0.0 && p < 1.0) {
            return Err(LossError::ScoreRange(p));
        }
        acc -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(acc / h.len() as f64)
}

/// Hallucination losses: MSE of each hallucinated stream against a detached
/// copy of its self-attended target. The detach keeps the gradient of each
/// term inside the source-modality branch. Returns (l_hal_av, l_hal_va, l_aux).
pub fn aux_loss_on_tape(tape: &mut Tape, trace: &TraceVars) -> Result<(Var, Var, Var)> {
    let ha = trace.hallucinated_audio.ok_or(LossError::MissingHallucination)?;
    let hv = trace.hallucinated_visual.ok_or(LossError::MissingHallucination)?;
    let mse = |tape: &mut Tape, pred: Var, target: Var| -> crate::numerics::Result<Var> {
        let t = tape.detach(target);
        let d = tape.sub(pred, t)?;
        let sq = tape.mul(d, d)?;
        Ok(tape.mean(sq))
    };
    let l_hal_va = mse(tape, ha, trace.a_a)?;
    let l_hal_av = mse(tape, hv, trace.v_v)?;
    let l_aux = tape.add(l_hal_av, l_hal_va)?;
    Ok((l_hal_av, l_hal_va, l_aux))
}

/// One forward pass and one backward pass on the joint loss, returning the
/// loss components and gradients for all partitions.
pub fn joint_loss(store: &ParamStore, video: &FeatureSequence) -> Result<(LossBundle, GradMap)> {
    let targets = video
        .targets_f64()
        .ok_or_else(|| LossError::Unlabeled(video.id.clone()))?;
    let mut tape = Tape::new();
    let trace = forward_on_tape(&mut tape, store, video, false)?;
    let l_pri = primary_loss_on_tape(&mut tape, trace.scores, &targets)?;
    let (l_hal_av, l_hal_va, l_aux) = aux_loss_on_tape(&mut tape, &trace)?;
    let l_joint = tape.add(l_pri, l_aux)?;
    let bundle = LossBundle {
        l_pri: tape.value(l_pri)[0],
        l_hal_av: tape.value(l_hal_av)[0],
        l_hal_va: tape.value(l_hal_va)[0],
        l_aux: tape.value(l_aux)[0],
        l_joint: tape.value(l_joint)[0],
    };
    let grads = tape.backward(l_joint)?;
    let gm = grads_by_name(&grads, &trace.param_vars, store);
    Ok((bundle, gm))
}

/// L_joint evaluated with the hallucination targets pinned to externally
/// supplied values instead of the live (detached) activations.
///
/// This is the function a finite-difference check must probe: the detach
/// makes the analytic gradient the partial derivative with the targets held
/// fixed at the base point, so perturbed evaluations must keep them there.
pub fn joint_loss_frozen_targets(
    store: &ParamStore,
    video: &FeatureSequence,
    frozen_a_a: &[f64],
    frozen_v_v: &[f64],
) -> Result<f64> {
    let targets = video
        .targets_f64()
        .ok_or_else(|| LossError::Unlabeled(video.id.clone()))?;
    let tr = crate::model::forward(store, video, false)?;
    let ha = tr.hallucinated_audio.as_ref().ok_or(LossError::MissingHallucination)?;
    let hv = tr.hallucinated_visual.as_ref().ok_or(LossError::MissingHallucination)?;
    let mse = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    };
    Ok(bce(&tr.scores, &targets)? + mse(ha, frozen_a_a) + mse(hv, frozen_v_v))
}

/// Loss components only, no backward pass.
pub fn loss_bundle(store: &ParamStore, video: &FeatureSequence) -> Result<LossBundle> {
    let targets = video
        .targets_f64()
        .ok_or_else(|| LossError::Unlabeled(video.id.clone()))?;
    let mut tape = Tape::new();
    let trace = forward_on_tape(&mut tape, store, video, false)?;
    let l_pri = primary_loss_on_tape(&mut tape, trace.scores, &targets)?;
    let (l_hal_av, l_hal_va, l_aux) = aux_loss_on_tape(&mut tape, &trace)?;
    let l_joint = tape.add(l_pri, l_aux)?;
    Ok(LossBundle {
        l_pri: tape.value(l_pri)[0],
        l_hal_av: tape.value(l_hal_av)[0],
        l_hal_va: tape.value(l_hal_va)[0],
        l_aux: tape.value(l_aux)[0],
        l_joint: tape.value(l_joint)[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Partition};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_store(seed: u64) -> ParamStore {
        ParamStore::init(ModelConfig { d_v: 4, d_a: 3, d: 4, d_h: 3, seed })
    }

    fn labeled_video(seed: u64, n: usize) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<f32> = (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        FeatureSequence {
            id: format!("v{seed}"),
            n_clips: n,
            visual: (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            audio: Some((0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            targets: Some(targets),
        }
    }

    #[test]
    fn bce_uniform_prediction_is_ln_two() {
        let h = vec![0.5; 7];
        let y = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        assert!((bce(&h, &y).unwrap() - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_hand_computation() {
        // -(ln 0.9 + ln 0.8) / 2
        let got = bce(&[0.9, 0.2], &[1.0, 0.0]).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn bce_rejects_degenerate_scores() {
        assert!(matches!(bce(&[0.0], &[0.0]), Err(LossError::ScoreRange(_))));
        assert!(matches!(bce(&[1.0], &[1.0]), Err(LossError::ScoreRange(_))));
        assert!(matches!(bce(&[0.5, 0.5], &[1.0]), Err(LossError::LengthMismatch(2, 1))));
    }

    #[test]
    fn tape_bce_matches_plain_bce_and_finite_differences() {
        let mut tape = Tape::new();
        let logits_data = vec![0.3, -1.2, 0.8, 2.0];
        let y = vec![1.0, 0.0, 1.0, 0.0];
        let logits = tape.leaf(4, 1, logits_data.clone());
        let h = tape.sigmoid(logits);
        let loss = primary_loss_on_tape(&mut tape, h, &y).unwrap();
        let h_vals: Vec<f64> = logits_data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        assert!((tape.value(loss)[0] - bce(&h_vals, &y).unwrap()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get_or_zeros(logits, 4);
        // d BCE / d logit = (h - y) / n for sigmoid outputs.
        for i in 0..4 {
            let want = (h_vals[i] - y[i]) / 4.0;
            assert!((g[i] - want).abs() < 1e-12, "grad {i}: {} vs {want}", g[i]);
        }
    }

    #[test]
    fn bundle_identities_are_exact() {
        let store = tiny_store(3);
        let video = labeled_video(11, 6);
        let b = loss_bundle(&store, &video).unwrap();
        assert_eq!(b.l_aux, b.l_hal_av + b.l_hal_va);
        assert_eq!(b.l_joint, b.l_pri + b.l_aux);
        assert!(b.l_pri > 0.0 && b.l_hal_av > 0.0 && b.l_hal_va > 0.0);
        let (b2, _) = joint_loss(&store, &video).unwrap();
        assert_eq!(b, b2);
    }

    #[test]
    fn aux_loss_matches_plain_mse() {
        let store = tiny_store(5);
        let video = labeled_video(13, 5);
        let tr = crate::model::forward(&store, &video, false).unwrap();
        let b = loss_bundle(&store, &video).unwrap();
        let mse = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        };
        let want_va = mse(tr.hallucinated_audio.as_ref().unwrap(), &tr.a_a);
        let want_av = mse(tr.hallucinated_visual.as_ref().unwrap(), &tr.v_v);
        assert!((b.l_hal_va - want_va).abs() < 1e-12);
        assert!((b.l_hal_av - want_av).abs() < 1e-12);
    }

    /// The detach-routing contract: gradients that must be blocked are
    /// bitwise zero, not merely small.
    #[test]
    fn detach_routes_gradients_exactly() {
        let store = tiny_store(7);
        let video = labeled_video(17, 6);
        let targets = video.targets_f64().unwrap();

        // Aux loss alone: no flow into primary partition, and no flow into
        // sa_aa via the detached target of l_hal_va.
        let mut tape = Tape::new();
        let trace = forward_on_tape(&mut tape, &store, &video, false).unwrap();
        let (_, l_hal_va, l_aux) = aux_loss_on_tape(&mut tape, &trace).unwrap();
        let grads = tape.backward(l_aux).unwrap();
        let gm = grads_by_name(&grads, &trace.param_vars, &store);
        for name in store.names_in(&[Partition::Primary]) {
            assert!(gm[&name].iter().all(|&g| g == 0.0), "aux loss leaked into {name}");
        }
        // l_hal_va's target detach: no path from l_hal_va into sa_aa.
        let mut tape = Tape::new();
        let trace = forward_on_tape(&mut tape, &store, &video, false).unwrap();
        let (_, l_hal_va2, _) = aux_loss_on_tape(&mut tape, &trace).unwrap();
        let _ = l_hal_va;
        let grads = tape.backward(l_hal_va2).unwrap();
        let gm = grads_by_name(&grads, &trace.param_vars, &store);
        for name in store.names() {
            if name.starts_with("sa_aa") || name.starts_with("hal_av") {
                assert!(gm[name].iter().all(|&g| g == 0.0), "l_hal_va leaked into {name}");
            }
        }
        // Symmetrically, l_hal_av must not reach sa_vv or hal_va.
        let mut tape = Tape::new();
        let trace = forward_on_tape(&mut tape, &store, &video, false).unwrap();
        let (l_hal_av, _, _) = aux_loss_on_tape(&mut tape, &trace).unwrap();
        let grads = tape.backward(l_hal_av).unwrap();
        let gm = grads_by_name(&grads, &trace.param_vars, &store);
        for name in store.names() {
            if name.starts_with("sa_vv") || name.starts_with("hal_va") {
                assert!(gm[name].iter().all(|&g| g == 0.0), "l_hal_av leaked into {name}");
            }
        }

        // Primary loss alone: no flow into the aux partition.
        let mut tape = Tape::new();
        let trace = forward_on_tape(&mut tape, &store, &video, false).unwrap();
        let l_pri = primary_loss_on_tape(&mut tape, trace.scores, &targets).unwrap();
        let grads = tape.backward(l_pri).unwrap();
        let gm = grads_by_name(&grads, &trace.param_vars, &store);
        for name in store.names_in(&[Partition::Aux]) {
            assert!(gm[&name].iter().all(|&g| g == 0.0), "primary loss leaked into {name}");
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let store = tiny_store(9);
        let video = labeled_video(19, 4);
        let (_, gm) = joint_loss(&store, &video).unwrap();
        // The detach freezes the hallucination targets, so the FD probe must
        // hold them at their base-point values.
        let base = crate::model::forward(&store, &video, false).unwrap();
        let (f_aa, f_vv) = (base.a_a.clone(), base.v_v.clone());
        let step = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Spot-check a handful of random coordinates in every parameter.
        for name in store.names() {
            let len = store.get(name).data.len();
            for _ in 0..2.min(len) {
                let i = rng.gen_range(0..len);
                let mut plus = store.clone();
                plus.get_mut(name).data[i] += step;
                let mut minus = store.clone();
                minus.get_mut(name).data[i] -= step;
                let lp = joint_loss_frozen_targets(&plus, &video, &f_aa, &f_vv).unwrap();
                let lm = joint_loss_frozen_targets(&minus, &video, &f_aa, &f_vv).unwrap();
                let fd = (lp - lm) / (2.0 * step);
                let an = gm[name][i];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{i}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn gradient_descent_on_joint_loss_decreases_it() {
        let mut store = tiny_store(21);
        let video = labeled_video(23, 8);
        let mut prev = loss_bundle(&store, &video).unwrap().l_joint;
        let first = prev;
        for _ in 0..50 {
            let (_, gm) = joint_loss(&store, &video).unwrap();
            let names: Vec<String> = store.names().cloned().collect();
            for name in names {
                let g = gm[&name].clone();
                for (p, gi) in store.get_mut(&name).data.iter_mut().zip(g) {
                    *p -= 0.05 * gi;
                }
            }
            prev = loss_bundle(&store, &video).unwrap().l_joint;
        }
        assert!(prev < first * 0.7, "joint loss {first} only reached {prev} after 50 steps");
    }

    #[test]
    fn uninformative_input_converges_to_base_rate() {
        // With constant features the only achievable optimum of BCE is the
        // positive base rate; 200 steps should approach it.
        let mut store = tiny_store(25);
        let n = 8;
        let video = FeatureSequence {
            id: "flat".into(),
            n_clips: n,
            visual: vec![0.25; n * 4],
            audio: Some(vec![-0.5; n * 3]),
            targets: Some(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
        };
        for _ in 0..200 {
            let (_, gm) = joint_loss(&store, &video).unwrap();
            let names: Vec<String> = store.names().cloned().collect();
            for name in names {
                let g = gm[&name].clone();
                for (p, gi) in store.get_mut(&name).data.iter_mut().zip(g) {
                    *p -= 0.1 * gi;
                }
            }
        }
        let tr = crate::model::forward(&store, &video, false).unwrap();
        // All clips share one feature vector, so all scores are equal; the
        // optimum is the base rate 0.25.
        for s in &tr.scores {
            assert!((s - 0.25).abs() < 0.02, "score {s} far from base rate");
        }
    }

    #[test]
    fn unlabeled_video_is_rejected() {
        let store = tiny_store(2);
        let mut video = labeled_video(3, 4);
        video.targets = None;
        assert!(matches!(loss_bundle(&store, &video), Err(LossError::Unlabeled(_))));
    }
}
