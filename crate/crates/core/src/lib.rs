//! Egocentric action recognition: a small reverse-mode autodiff engine,
//! attention-pooled recurrent cells, hierarchical-feature TSN, structured
//! verb/noun/action heads, a two-stream cross-modal model, training presets,
//! score-level ensembling and evaluation metrics.

pub mod error;
pub mod tensor;
pub mod autodiff;
pub mod tnsf;
pub mod params;
pub mod cells;
pub mod heads;
pub mod hf_tsn;
pub mod two_stream;
pub mod training;
pub mod models;
pub mod scores;
pub mod metrics;
pub mod experiment;
pub mod gradsuite;

pub use error::{Error, Result};
pub use tensor::Tensor;
