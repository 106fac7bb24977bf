#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN
//! Weakly supervised dense video captioning core: proposal decoding,
//! multi-teacher distillation, cross-modal matching, beam-search captioning
//! and evaluation metrics, plus the file formats and pipeline driving them.
//!
//! Frames are integer indices and intervals are half-open; seconds appear
//! only in result files.

pub mod caption;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod proposal;
pub mod synth;
pub mod temporal;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use temporal::{iou, FeatureSequence, TemporalInterval};
