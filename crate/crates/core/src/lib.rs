//! Span-based nested named entity recognition.
//!
//! Every span of a sentence is scored from a grid of span features built by
//! a multi-head biaffine layer and refined with residual, bias-free 2-D
//! convolutions. Spans are decoded greedily under a non-crossing constraint.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
