//! Graph-based fusion of heterogeneous per-frame speech features for
//! continuous emotion regression (arousal, valence, liking).
//!
//! Five feature streams are encoded to equal-width vertex vectors by
//! per-stream LSTM stacks, fused through a learned graph with task-specific
//! topology and multi-dimensional edge features, and read out by a recurrent
//! regressor trained against a concordance-correlation-coefficient loss.
//! Ablation fusion strategies (averaging, fully connected, scalar-edge graph
//! variants, per-stream ensembles) share the same training and evaluation
//! machinery so their scores are directly comparable.
//!
//! Everything is built on a small reverse-mode autodiff tape over dense f64
//! tensors ([`tape`]), with RMSprop as the optimizer. Corpora are synthetic
//! by default ([`data`]) with a planted cross-stream interaction so that no
//! single stream suffices, or imported from delimited feature files.

pub mod baselines;
pub mod check;
pub mod cli;
pub mod config;
pub mod ctx;
pub mod data;
pub mod edges;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
