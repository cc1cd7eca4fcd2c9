//! Letter-sequence recognition from short video clips: a convolutional
//! backbone with context-based spatial attention, a causal transformer
//! encoder, CTC training with a maximum-entropy regulariser, and greedy,
//! beam and language-model-fused decoding.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix it to `f64`, which every tolerance in the test suite assumes.

pub mod config;
pub mod ctc;
pub mod data;
pub mod decoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid = numerics::Grid<f64>;
pub type Tape = numerics::Tape<f64>;
pub type ParamSet = numerics::ParamSet<f64>;
pub type FrameDistributionSeq = ctc::FrameDistributionSeq<f64>;
pub type LossReport = losses::LossReport<f64>;
pub type Model = model::Model<f64>;
pub type TrainOutcome = training::TrainOutcome<f64>;
