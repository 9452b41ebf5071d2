//! Influence-aware pretraining for a small span-corruption encoder-decoder
//! model: per-sample gradient self-influence scoring, score-based dataset
//! filtering, and softmax-weighted microbatch gradient aggregation during
//! training.
//!
//! Everything is f64 and single-run deterministic: given the same config and
//! seeds, losses, scores, and checkpoints are bitwise reproducible.

pub mod batch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod influence;
pub mod model;
pub mod optim;
pub mod params;
pub mod reweight;
pub mod rng;
pub mod span;
pub mod strategy;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
