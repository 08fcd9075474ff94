//! Compression engine for small convolutional networks.
//!
//! The pipeline estimates how many filters a trained network can lose by
//! running PCA on per-layer weight-gradient matrices (effective filter
//! analysis), then removes filters and whole layers with a hierarchical
//! entropy/cross-entropy criterion and retrains the compact architecture
//! from scratch.
//!
//! Everything is plain `f64` on the CPU. With the default `parallel`
//! feature the batch-level inner loops fan out over a rayon pool; results
//! are bitwise identical to the sequential fallback because every output
//! cell is reduced in a fixed order.

pub mod checkpoint;
pub mod data;
pub mod efa;
pub mod entropy;
pub mod error;
pub mod error_analysis;
pub mod fisher;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod par;
pub mod prune;
pub mod report;
pub mod singularity;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
