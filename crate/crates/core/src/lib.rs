//! Patch-tokenized multivariate time-series forecasting.
//!
//! A two-stage pipeline: a shared convolutional encoder turns fixed-length
//! temporal patches into token embeddings (refined by token self-attention),
//! then a Transformer encoder models inter-patch dependencies and predicts
//! patch-level targets at a fixed horizon. Ships with a controlled synthetic
//! benchmark generator, TCN and patch-Transformer baselines, a two-stage
//! training protocol, and binary dataset/checkpoint persistence.

pub mod baselines;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod forecaster;
pub mod numerics;
pub mod patching;
pub mod synthgen;
pub mod training;

pub use baselines::{PatchTstConfig, TcnConfig};
pub use encoder::{EncoderConfig, TokenSequence};
pub use error::{Error, Result};
pub use forecaster::ForecasterConfig;
pub use numerics::{AdamW, ParamSet, Tape, Tensor, ValueId};
pub use synthgen::{SeriesSample, SynthConfig};
pub use training::{MetricsReport, Model, TrainConfig};
