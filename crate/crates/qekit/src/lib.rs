//! Desk-scale translation quality estimation toolkit.
//!
//! The pipeline follows the predictor–estimator shape common in current QE
//! systems: a (toy or
//! precomputed) encoder produces per-layer hidden states for the
//! `[cls] target [sep] source [eos]` input, a sparsemax-weighted scalar mix
//! pools the layers, and two heads read the pooled states — a feed-forward
//! regressor on the `[cls]` row for sentence scores and a linear projection
//! over target-token rows for word labels. On top of that sit multi-task
//! training with hand-derived gradients, per-language-pair ensembling with
//! deterministic weight search, conversion of BAD tags into character-level
//! error spans with severities, pseudo-reference channel weighting, and the
//! usual evaluation metrics (Spearman/Pearson/Kendall, MCC, per-class F1,
//! severity-weighted span F1).
//!
//! Everything is deterministic in the seeds it is given: batch reductions run
//! in index order regardless of thread count, so the `parallel` feature only
//! changes wall-clock time, never results.

pub mod data;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod span;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
