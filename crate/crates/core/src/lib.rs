//! Multi-spatial graph convolution Seq2Seq traffic forecasting.
//!
//! The pipeline, bottom to top:
//!
//! - [`tensor`]: dense f64 arrays with tape-based reverse-mode differentiation
//!   and an Adam optimizer.
//! - [`graph`]: traffic graph construction — Gaussian-kernel adjacency,
//!   normalized spectral matrix, travel-time matrix.
//! - [`embedding`]: node2vec walks plus a skip-gram trainer for spatial node
//!   embeddings and weekly time-slot embeddings.
//! - [`correlation`]: the three spatial correlation views (semantic attention,
//!   adjacent trend, cross-step reachability) and the graph convolution that
//!   consumes them.
//! - [`model`]: feature fusion, GRU encoder/decoder with multi-head temporal
//!   attention, checkpointing.
//! - [`data`]: ingestion, sliding windows and splits, fault/sparsity
//!   transforms, synthetic dataset generation.
//! - [`training`]: normalization, masked loss, scheduled sampling, the
//!   optimization loop, metrics, and the historical-average baseline.

pub mod config;
pub mod correlation;
pub mod data;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use config::ModelConfig;

pub use error::{Error, Result};
pub use tensor::{Array, Tape, Tensor};
