//! Span scoring model: encoder, start/end projections, multi-head biaffine
//! span features, residual grid convolutions and the sigmoid output layer.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod scorer;

pub use checkpoint::{Checkpoint, StoredTensor};
pub use config::ModelConfig;
pub use params::{InitOptions, ModelParams};
pub use scorer::{bce_from_logits, bce_loss, pad_grids, split_grids, Batch, Forward, SentenceInput, SpanGrid, SpanScorer};
