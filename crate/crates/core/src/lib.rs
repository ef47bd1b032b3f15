//! Latent-activation election forecasting on an instrumented transformer.

pub mod aggregate;
pub mod container;
pub mod distribution;
pub mod error;
pub mod metrics;
pub mod model;
pub mod persona;
pub mod pipeline;
pub mod probe;
pub mod report;
pub mod select;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
