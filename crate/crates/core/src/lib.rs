//! Skeleton-sequence gait recognition with hop-extracted multi-scale graph
//! convolution.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: skeleton graphs, hop distances, k-adjacency and polynomial
//!   aggregation operators, and the weighting-bias diagnostic.
//! - [`data`]: keypoint sequences, the JSON Lines file format, confidence
//!   filtering, normalisation, fixed-length shaping and subject splits.
//! - [`augment`]: time reversal, mirroring and joint jitter.
//! - [`nnkernel`]: a small double-precision tensor library with a reverse-mode
//!   tape, Adam and a binary checkpoint format.
//! - [`model`]: the residual graph-convolution network.
//! - [`train`]: supervised contrastive training with a cyclic learning rate.
//! - [`eval`]: gallery/probe rank-1 evaluation and the ablation harness.
//! - [`synth`]: a procedural gait generator for desk-scale experiments.
//! - [`config`]: the sectioned JSON configuration shared by the CLI.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod nnkernel;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
