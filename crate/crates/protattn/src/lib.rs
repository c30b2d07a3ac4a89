//! # protattn
//!
//! Multi-label protein sequence classification built around bidirectional
//! recurrent encoders and an attention layer whose weights are rescaled by
//! their maximum. Plain softmax attention spreads its mass across every
//! informative position, so on long sequences no position can keep a large
//! weight; rescaling pins the strongest position at a configurable ceiling
//! while preserving the relative ordering of the rest.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape over
//! dense `f64` tensors, n-mer tokenization and overlapping segmentation for
//! long sequences, GRU/LSTM cells, Adam training, a segment-to-sequence
//! aggregation pipeline, and a synthetic planted-motif benchmark for
//! head-to-head comparisons between attention variants.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod layers;
pub mod pipeline;
pub mod seqdata;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
