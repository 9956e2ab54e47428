//! SubTree Attention (STA): multi-hop graph attention computed in linear time
//! by letting kernelised keys and values random-walk over the graph.
//!
//! Modules:
//! - [`graph`]: CSR graphs, random-walk propagation, spectra, positional encodings
//! - [`diff`]: reverse-mode tape, Adam, gradient checking, checkpoints
//! - [`attention`]: feature map, efficient and dense STA, global attention, multi-head gates, hop aggregation
//! - [`model`]: STAGNN, the global-attention hybrid, training and metrics
//! - [`theory`]: empirical checks of random-walk mixing and STA → SA convergence
//! - [`data`], [`config`], [`bench`]: datasets, run configuration, timing harness

pub mod attention;
pub mod bench;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use graph::{Graph, SpectralInfo, TransitionKind};
pub use matrix::Matrix;
