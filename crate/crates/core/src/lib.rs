//! Condition monitoring for rotating machinery by next-token prediction.
//!
//! Multi-channel sensor windows are split into a context and a short target.
//! The target is quantised per channel into a discrete token with k-means
//! codebooks, the context is cut into patches and encoded by a small
//! Transformer, and the model predicts one token distribution per channel.
//! At inference the window-level cross-entropy (WLF) is compared against a
//! healthy baseline to form a health index, and alarms fire when it crosses a
//! calibrated threshold.
//!
//! Module map:
//!
//! - [`signal`]: series, CSV I/O, normalisation, windowing and streaming.
//! - [`tokenizer`]: k-means codebooks and target tokenisation.
//! - [`sequence`]: the channel-major patch sequence.
//! - [`model`], [`nn`]: backbone parameters, forward and backward passes.
//! - [`train`], [`checkpoint`]: Adam training with partial freezing, and the
//!   binary checkpoint format.
//! - [`monitor`], [`eval`]: health index, alarms, calibration and metrics.
//! - [`synth`]: synthetic runs with a degradation profile and wear labels.
//! - [`config`], [`pipeline`], [`cli`]: the end-to-end workflow.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod monitor;
pub mod nn;
pub mod pipeline;
pub mod sequence;
pub mod signal;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{LormError, Result};
