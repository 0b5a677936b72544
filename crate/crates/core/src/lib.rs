//! Audio-visual highlight detection with cross-modal hallucination as a
//! self-supervised auxiliary task, meta-auxiliary training, and per-instance
//! test-time adaptation, backed by a small reverse-mode autodiff engine and
//! a synthetic audio-visual benchmark.

pub mod adapt;
pub mod cli;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;
