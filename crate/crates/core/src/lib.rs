//! Coherence alignment of token embeddings through kernel-weighted tensor
//! fields.
//!
//! Each token embedding `e_i` in a mini-batch gets a rank-1 tensor field
//! `T_i = e_i c_i^T`, where `c_i` is the kernel-weighted mean of the batch
//! embeddings. Training pulls every field toward the batch mean field under
//! a squared Frobenius loss, with a spectral-norm constraint on the fields.
//!
//! Modules, bottom-up:
//! - [`corpus`]: tokenization, vocabulary, stratified splits and batches
//! - [`embedding`]: the embedding table and cosine queries
//! - [`kernel`]: kernel families and median-heuristic bandwidth
//! - [`field`]: tensor fields, mean field, spectral projection
//! - [`coherence`]: loss, semi-gradient, finite-difference oracles
//! - [`trainer`]: the mini-batch training loop
//! - [`lm`]: tied-embedding bigram model and joint training
//! - [`report`]: PCA, histograms, rare-word tables, report files
//! - [`pipeline`]: end-to-end runs shared by the CLI and tests

// `!(x > 0.0)` style checks double as NaN guards.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod coherence;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod field;
pub mod kernel;
pub mod lm;
pub mod pipeline;
pub mod report;
pub mod trainer;

pub use error::{Result, ScaError};
