//! Experiment orchestration: resolved run configs, the pipelines behind each
//! subcommand, and reproducible reporting. Every run writes its fully
//! resolved config next to its outputs so it can be replayed bit-exactly.

use crate::adapt::{self, AdaptStrategy};
use crate::data::{self, Dataset, SynthConfig};
use crate::eval::{self, BinarizeRule};
use crate::losses;
use crate::model::{ModelConfig, ParamStore};
use crate::numerics::Tape;
use crate::training::{self, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("train: {0}")]
    Train(#[from] training::TrainError),
    #[error("adapt: {0}")]
    Adapt(#[from] adapt::AdaptError),
    #[error("eval: {0}")]
    Eval(#[from] eval::EvalError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Fully resolved run configuration. File values are overridden by CLI
/// flags; the merged result is what gets persisted and replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub strategy: AdaptStrategy,
    pub threads: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            model: ModelConfig::default(),
            train: train.clone(),
            synth: SynthConfig::default(),
            strategy: AdaptStrategy::Hallucination {
                lambda: train.inner_lr,
                k: train.inner_steps,
            },
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "mtta", version, about = "Audio-visual highlight detection with test-time adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Joint,
    Meta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Halluc,
    Entropy,
    Pseudo,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyArg {
    Updates,
    Noise,
    DropAudio,
    DropTrain,
    CrossDataset,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON run-config file; CLI flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train / iid-test / shifted-test splits.
    GenSynth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a checkpoint: joint first, then meta from a joint checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Directory holding train.avhf (from gen-synth).
        #[arg(long)]
        data: PathBuf,
        /// Joint checkpoint to initialize meta training.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Adapt per video and evaluate a split.
    AdaptEval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// An .avhf split file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        strategy: StrategyArg,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tau_lo: Option<f64>,
        #[arg(long)]
        tau_hi: Option<f64>,
    },
    /// Desk-scale ablation sweeps.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        study: StudyArg,
    },
    /// Distribution-shift diagnostic: FID between train halves and test.
    ShiftScore {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory holding train.avhf and test_shifted.avhf.
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the gradient-check suite.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => {
            let mut c = RunConfig::default();
            // env seed is the last resort, below any explicit flag
            if let Ok(s) = std::env::var("MTTA_SEED") {
                let v = s.parse().map_err(|_| CliError::Config(format!("MTTA_SEED not a u64: {s}")))?;
                c.seed = v;
            }
            c
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.threads = common.threads;
    // one seed drives every stage
    cfg.model.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    cfg.synth.seed = cfg.seed;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if cfg.train.inner_lr <= 0.0 || cfg.train.meta_lr <= 0.0 {
        return Err(CliError::Config("learning rates must be positive".into()));
    }
    if cfg.train.inner_steps < 1 || cfg.train.batch_size < 1 {
        return Err(CliError::Config("inner_steps and batch_size must be >= 1".into()));
    }
    if cfg.model.d_v < 1 || cfg.model.d_a < 1 || cfg.model.d < 1 || cfg.model.d_h < 1 {
        return Err(CliError::Config("model dims must be >= 1".into()));
    }
    if cfg.threads != 1 {
        return Err(CliError::Config("only --threads 1 is supported (bit-reproducible mode)".into()));
    }
    Ok(())
}

fn write_run_files(out: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let resolved = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(out.join("resolved_config.json"), resolved)?;
    let manifest = serde_json::json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "threads": cfg.threads,
    });
    std::fs::write(
        out.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )?;
    Ok(())
}

fn strategy_from_args(
    cfg: &RunConfig,
    strategy: StrategyArg,
    lambda: Option<f64>,
    k: Option<usize>,
    tau_lo: Option<f64>,
    tau_hi: Option<f64>,
) -> AdaptStrategy {
    let lambda = lambda.unwrap_or(cfg.train.inner_lr);
    let k = k.unwrap_or(cfg.train.inner_steps);
    match strategy {
        StrategyArg::Halluc => AdaptStrategy::Hallucination { lambda, k },
        StrategyArg::Entropy => AdaptStrategy::Entropy { lambda, k },
        StrategyArg::Pseudo => AdaptStrategy::PseudoLabel {
            lambda,
            k,
            tau_lo: tau_lo.unwrap_or(0.2),
            tau_hi: tau_hi.unwrap_or(0.8),
        },
        StrategyArg::None => AdaptStrategy::None,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth { common } => {
            let cfg = resolve_config(common)?;
            write_run_files(&common.out, &cfg, "gen-synth")?;
            let (train, iid, shifted) = data::generate_synthetic(&cfg.synth)
                .map_err(|e| CliError::Config(e.to_string()))?;
            data::write_avhf(&train, &common.out.join("train.avhf"))?;
            data::write_avhf(&iid, &common.out.join("test_iid.avhf"))?;
            data::write_avhf(&shifted, &common.out.join("test_shifted.avhf"))?;
            println!(
                "gen-synth: wrote {} train / {} iid / {} shifted videos to {}",
                train.videos.len(),
                iid.videos.len(),
                shifted.videos.len(),
                common.out.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            stage,
            data: data_dir,
            init,
            epochs,
            lr,
        } => {
            let mut cfg = resolve_config(common)?;
            if let Some(e) = epochs {
                match stage {
                    StageArg::Joint => cfg.train.joint_epochs = *e,
                    StageArg::Meta => cfg.train.meta_epochs = *e,
                }
            }
            if let Some(lr) = lr {
                cfg.train.meta_lr = *lr;
            }
            write_run_files(&common.out, &cfg, "train")?;
            let train_set = data::read_avhf(&data_dir.join("train.avhf"))?;
            match stage {
                StageArg::Joint => {
                    let mut params = ParamStore::init(cfg.model);
                    let history = training::train_joint(&mut params, &train_set, &cfg.train)?;
                    params.save(&common.out.join("joint.mtta"))?;
                    std::fs::write(common.out.join("history_joint.csv"), training::history_csv(&history))?;
                    println!("train joint: {} epochs, checkpoint at {}", cfg.train.joint_epochs, common.out.join("joint.mtta").display());
                }
                StageArg::Meta => {
                    let init_path = init.as_ref().ok_or_else(|| {
                        CliError::Config("--stage meta requires --init <joint checkpoint>".into())
                    })?;
                    let mut params = ParamStore::load(init_path)?;
                    let history = training::train_meta(&mut params, &train_set, &cfg.train)?;
                    params.save(&common.out.join("meta.mtta"))?;
                    std::fs::write(common.out.join("history_meta.csv"), training::history_csv(&history))?;
                    println!("train meta: {} epochs, checkpoint at {}", cfg.train.meta_epochs, common.out.join("meta.mtta").display());
                }
            }
            Ok(())
        }
        Command::AdaptEval {
            common,
            checkpoint,
            data: data_path,
            strategy,
            lambda,
            k,
            tau_lo,
            tau_hi,
        } => {
            let mut cfg = resolve_config(common)?;
            cfg.strategy = strategy_from_args(&cfg, *strategy, *lambda, *k, *tau_lo, *tau_hi);
            write_run_files(&common.out, &cfg, "adapt-eval")?;
            let params = ParamStore::load(checkpoint)?;
            let split = data::read_avhf(data_path)?;
            let (summary, reports) =
                adapt::evaluate_split(&params, &split, &cfg.strategy, BinarizeRule::Threshold(0.5))?;
            std::fs::write(common.out.join("metrics.csv"), eval::metrics_csv(&summary))?;
            std::fs::write(common.out.join("reports.jsonl"), adapt::reports_jsonl(&reports))?;
            println!(
                "adapt-eval: map={:.4} top5_map={:.4} hit@1={:.4} over {} videos",
                summary.map, summary.top5_map, summary.hit_at_1, summary.n_videos
            );
            Ok(())
        }
        Command::Ablate { common, study } => {
            let cfg = resolve_config(common)?;
            write_run_files(&common.out, &cfg, "ablate")?;
            let csv = run_study(&cfg, *study)?;
            let name = format!("study_{}.csv", study_name(*study));
            std::fs::write(common.out.join(&name), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::ShiftScore { common, data: data_dir } => {
            let cfg = resolve_config(common)?;
            write_run_files(&common.out, &cfg, "shift-score")?;
            let train = data::read_avhf(&data_dir.join("train.avhf"))?;
            let shifted = data::read_avhf(&data_dir.join("test_shifted.avhf"))?;
            let csv = shift_score_csv(&train, &shifted, cfg.seed)?;
            std::fs::write(common.out.join("shift_score.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck { cases, seed } => {
            let seed = seed.unwrap_or(0);
            let report = gradcheck(*cases, seed);
            for line in &report.lines {
                println!("{line}");
            }
            if report.max_rel_err < 1e-4 {
                println!("gradcheck PASS: max rel err {:.3e} over {} cases", report.max_rel_err, cases);
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradcheck failed: max rel err {:.3e} >= 1e-4",
                    report.max_rel_err
                )))
            }
        }
    }
}

fn study_name(study: StudyArg) -> &'static str {
    match study {
        StudyArg::Updates => "updates",
        StudyArg::Noise => "noise",
        StudyArg::DropAudio => "drop_audio",
        StudyArg::DropTrain => "drop_train",
        StudyArg::CrossDataset => "cross_dataset",
    }
}

/// Trains joint (and optionally meta) checkpoints for a study run.
fn train_pipeline(
    cfg: &RunConfig,
    train_set: &Dataset,
    with_meta: bool,
) -> Result<(ParamStore, Option<ParamStore>)> {
    let mut joint = ParamStore::init(cfg.model);
    training::train_joint(&mut joint, train_set, &cfg.train)?;
    let meta = if with_meta {
        let mut m = joint.clone();
        training::train_meta(&mut m, train_set, &cfg.train)?;
        Some(m)
    } else {
        None
    };
    Ok((joint, meta))
}

fn eval_map(params: &ParamStore, split: &Dataset, strategy: &AdaptStrategy) -> Result<f64> {
    let (summary, _) = adapt::evaluate_split(params, split, strategy, BinarizeRule::Threshold(0.5))?;
    Ok(summary.map)
}

fn run_study(cfg: &RunConfig, study: StudyArg) -> Result<String> {
    let (train_set, _iid, shifted) = data::generate_synthetic(&cfg.synth)
        .map_err(|e| CliError::Config(e.to_string()))?;
    match study {
        StudyArg::Updates => {
            let mut csv = String::from("k,map_meta_tta\n");
            for k in [1usize, 2, 3] {
                let mut c = cfg.clone();
                c.train.inner_steps = k;
                let (_, meta) = train_pipeline(&c, &train_set, true)?;
                let meta = meta.unwrap();
                let strat = AdaptStrategy::Hallucination { lambda: c.train.inner_lr, k };
                let m = eval_map(&meta, &shifted, &strat)?;
                csv.push_str(&format!("{k},{m}\n"));
            }
            Ok(csv)
        }
        StudyArg::Noise => {
            let (joint, meta) = train_pipeline(cfg, &train_set, true)?;
            let meta = meta.unwrap();
            let strat = AdaptStrategy::Hallucination {
                lambda: cfg.train.inner_lr,
                k: cfg.train.inner_steps,
            };
            let mut csv = String::from("sigma,map_joint,map_meta_tta\n");
            for sigma in [0.0, 0.25, 0.5] {
                let noisy = data::corrupt_gaussian(&shifted, sigma, cfg.seed.wrapping_add(31));
                let m_joint = eval_map(&joint, &noisy, &AdaptStrategy::None)?;
                let m_meta = eval_map(&meta, &noisy, &strat)?;
                csv.push_str(&format!("{sigma},{m_joint},{m_meta}\n"));
            }
            Ok(csv)
        }
        StudyArg::DropAudio => {
            let (joint, meta) = train_pipeline(cfg, &train_set, true)?;
            let meta = meta.unwrap();
            let strat = AdaptStrategy::Hallucination {
                lambda: cfg.train.inner_lr,
                k: cfg.train.inner_steps,
            };
            let mut csv = String::from("fraction,map_joint,map_meta_tta\n");
            for fraction in [0.0, 0.25] {
                let dropped = data::drop_audio(&shifted, fraction, cfg.seed.wrapping_add(17));
                let m_joint = eval_map(&joint, &dropped, &AdaptStrategy::None)?;
                let m_meta = eval_map(&meta, &dropped, &strat)?;
                csv.push_str(&format!("{fraction},{m_joint},{m_meta}\n"));
            }
            Ok(csv)
        }
        StudyArg::DropTrain => {
            let strat = AdaptStrategy::Hallucination {
                lambda: cfg.train.inner_lr,
                k: cfg.train.inner_steps,
            };
            let mut csv = String::from("fraction,n_train,map_meta_tta\n");
            for fraction in [0.0, 0.1, 0.25] {
                let reduced = data::drop_train_fraction(&train_set, fraction, cfg.seed.wrapping_add(23));
                let (_, meta) = train_pipeline(cfg, &reduced, true)?;
                let m = eval_map(&meta.unwrap(), &shifted, &strat)?;
                csv.push_str(&format!("{fraction},{},{m}\n", reduced.videos.len()));
            }
            Ok(csv)
        }
        StudyArg::CrossDataset => {
            // family B: same generator shape, different mixing and shift
            let mut synth_b = cfg.synth.clone();
            synth_b.seed = cfg.synth.seed.wrapping_add(1_000_003);
            synth_b.rho = (cfg.synth.rho + 0.15).min(0.95);
            let (_, iid_b, shifted_b) = data::generate_synthetic(&synth_b)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let (joint, meta) = train_pipeline(cfg, &train_set, true)?;
            let meta = meta.unwrap();
            let strat = AdaptStrategy::Hallucination {
                lambda: cfg.train.inner_lr,
                k: cfg.train.inner_steps,
            };
            let mut csv = String::from("target,map_joint,map_meta_tta\n");
            for (name, split) in [("family_b_iid", &iid_b), ("family_b_shifted", &shifted_b)] {
                let m_joint = eval_map(&joint, split, &AdaptStrategy::None)?;
                let m_meta = eval_map(&meta, split, &strat)?;
                csv.push_str(&format!("{name},{m_joint},{m_meta}\n"));
            }
            Ok(csv)
        }
    }
}

/// FID rows: train-half-1 vs train-half-2, and each half vs the shifted test.
pub fn shift_score_csv(train: &Dataset, shifted: &Dataset, seed: u64) -> Result<String> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..train.videos.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x715));
    idx.shuffle(&mut rng);
    let half = train.videos.len() / 2;
    let subset = |ids: &[usize], tag: &str| Dataset {
        videos: ids.iter().map(|&i| train.videos[i].clone()).collect(),
        split: tag.to_string(),
        d_v: train.d_v,
        d_a: train.d_a,
        provenance: train.provenance.clone(),
    };
    let p1 = subset(&idx[..half], "train-p1");
    let p2 = subset(&idx[half..], "train-p2");
    let feats = |ds: &Dataset| eval::video_fid_features(ds);
    let (f1, n1, d) = feats(&p1)?;
    let (f2, n2, _) = feats(&p2)?;
    let (fs, ns, _) = feats(shifted)?;
    let fid = |a: &[f64], na: usize, b: &[f64], nb: usize| -> Result<f64> {
        Ok(eval::fid_shift(a, na, b, nb, d)?.fid)
    };
    let mut csv = String::from("split_a,split_b,fid\n");
    csv.push_str(&format!("train-p1,train-p2,{}\n", fid(&f1, n1, &f2, n2)?));
    csv.push_str(&format!("train-p1,test-shifted,{}\n", fid(&f1, n1, &fs, ns)?));
    csv.push_str(&format!("train-p2,test-shifted,{}\n", fid(&f2, n2, &fs, ns)?));
    Ok(csv)
}

pub struct GradcheckReport {
    pub lines: Vec<String>,
    pub max_rel_err: f64,
}

/// Central finite differences against the analytic gradient: random small
/// cases for each differentiable op, plus the full joint loss.
pub fn gradcheck(cases: usize, seed: u64) -> GradcheckReport {
    let mut lines = Vec::new();
    let mut max_rel = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let rel = gradcheck_ops_case(&mut rng);
        max_rel = max_rel.max(rel);
        if case < 5 {
            lines.push(format!("op-case {case}: max rel err {rel:.3e}"));
        }
    }
    // full model joint loss on a tiny instance
    let rel = gradcheck_full_model(seed);
    lines.push(format!("full joint loss: max rel err {rel:.3e}"));
    max_rel = max_rel.max(rel);
    GradcheckReport {
        lines,
        max_rel_err: max_rel,
    }
}

/// One random composite-op case; returns the max relative error.
fn gradcheck_ops_case(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.gen_range(2..=6);
    let k = rng.gen_range(2..=8);
    let n = rng.gen_range(2..=6);
    let x0: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let w0: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let eval_loss = |xv: &[f64], wv: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(m, k, xv.to_vec());
        let w = t.leaf(k, n, wv.to_vec());
        let mm = t.matmul(x, w).unwrap();
        let sm = t.softmax_rows(mm).unwrap();
        let sg = t.sigmoid(mm);
        let p = t.mul(sm, sg).unwrap();
        let r = t.relu(p);
        let half = t.scale(sg, 0.5);
        let ones = t.constant(m, n, vec![1.0; m * n]);
        let shifted = t.add(half, ones).unwrap();
        let lg = t.ln(shifted);
        let q = t.add(r, lg).unwrap();
        let s = t.sub(q, sm).unwrap();
        let loss = t.mean(s);
        t.value(loss)[0]
    };
    let analytic = {
        let mut t = Tape::new();
        let x = t.leaf(m, k, x0.clone());
        let w = t.leaf(k, n, w0.clone());
        let mm = t.matmul(x, w).unwrap();
        let sm = t.softmax_rows(mm).unwrap();
        let sg = t.sigmoid(mm);
        let p = t.mul(sm, sg).unwrap();
        let r = t.relu(p);
        let half = t.scale(sg, 0.5);
        let ones = t.constant(m, n, vec![1.0; m * n]);
        let shifted = t.add(half, ones).unwrap();
        let lg = t.ln(shifted);
        let q = t.add(r, lg).unwrap();
        let s = t.sub(q, sm).unwrap();
        let loss = t.mean(s);
        let grads = t.backward(loss).unwrap();
        (
            grads.get_or_zeros(x, m * k),
            grads.get_or_zeros(w, k * n),
        )
    };
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut check = |vals: &[f64], grad: &[f64], which: usize| {
        for i in 0..vals.len() {
            let mut vp = vals.to_vec();
            vp[i] += h;
            let mut vm = vals.to_vec();
            vm[i] -= h;
            let (fp, fm) = if which == 0 {
                (eval_loss(&vp, &w0), eval_loss(&vm, &w0))
            } else {
                (eval_loss(&x0, &vp), eval_loss(&x0, &vm))
            };
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            max_rel = max_rel.max((grad[i] - fd).abs() / denom);
        }
    };
    check(&x0, &analytic.0, 0);
    check(&w0, &analytic.1, 1);
    max_rel
}

/// Finite-difference check of the full joint loss gradient on a tiny model.
pub fn gradcheck_full_model(seed: u64) -> f64 {
    let model_cfg = ModelConfig {
        d_v: 4,
        d_a: 3,
        d: 4,
        d_h: 3,
        seed,
    };
    let synth = SynthConfig {
        n_train: 1,
        n_test: 1,
        clips_min: 3,
        clips_max: 3,
        d_v: 4,
        d_a: 3,
        d_z: 2,
        seed,
        ..SynthConfig::default()
    };
    let (train, _, _) = data::generate_synthetic(&synth).expect("valid config");
    let video = &train.videos[0];
    let store = ParamStore::init(model_cfg);
    let (_, grads) = losses::joint_loss(&store, video).expect("joint loss");
    // The detached hallucination targets must stay at their base-point
    // values while the finite differences probe each coordinate.
    let base = crate::model::forward(&store, video, false).expect("forward");
    let (f_aa, f_vv) = (base.a_a.clone(), base.v_v.clone());
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let p = store.get(name);
        for i in 0..p.data.len() {
            let mut plus = store.clone();
            plus.get_mut(name).data[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name).data[i] -= h;
            let lp = losses::joint_loss_frozen_targets(&plus, video, &f_aa, &f_vv).unwrap();
            let lm = losses::joint_loss_frozen_targets(&minus, video, &f_aa, &f_vv).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grads[name][i];
            let denom = fd.abs().max(g.abs()).max(1e-6);
            max_rel = max_rel.max((g - fd).abs() / denom);
        }
    }
    max_rel
}
