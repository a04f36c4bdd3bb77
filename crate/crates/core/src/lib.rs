//! Pause-aware text-to-spectrogram synthesis.
//!
//! The crate implements a trainable acoustic model that turns a phoneme
//! sequence plus word-level context vectors into a mel-spectrogram, with
//! explicit modeling of inter-word pauses:
//!
//! - [`ingest`]: corpus loading, forced-alignment parsing, pause labeling,
//!   acoustic feature extraction.
//! - [`context`]: word-level context vectors (precomputed tensors or a
//!   deterministic fallback).
//! - [`phrasing`]: speaker-dependent syntactic encoder and 4-class pause
//!   predictor with a trainable pause embedding.
//! - [`pauseword`]: segment pooling and segment-position encoding over
//!   intentional-pause-delimited word groups.
//! - [`acoustic`]: phoneme encoder, variance adaptor, length regulation
//!   and the mel decoder.
//! - [`adversarial`]: multi-length window discriminator and LSGAN losses.
//! - [`trainer`]: loss aggregation, AdamW optimization, checkpointing.
//! - [`metrics`]: DTW, MCD, F0 RMSE, DDUR and pause-prediction scores.
//!
//! All model math runs in `f64` on a small tape-based autodiff engine
//! ([`graph`]); tensors on disk use the `.pst` format ([`pst`]).
//!
//! With the default `parallel` feature, batch gradients and corpus-level
//! evaluation fan out over rayon; without it everything runs sequentially
//! on one thread.

pub mod acoustic;
pub mod adversarial;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod phrasing;
pub mod pauseword;
pub mod pst;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use config::Config;
pub use graph::{Graph, Mode, NodeId};
pub use model::Model;
pub use tensor::Mat;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("record {id}: {msg}")]
    Load { id: String, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
