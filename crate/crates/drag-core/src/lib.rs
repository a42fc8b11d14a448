//! Node-level fraud detection on multi-relation graphs with a three-stage
//! attention network.
//!
//! The crate is organized bottom-up:
//!
//! * [`diff`]: dense matrices, a reverse-mode autodiff tape, and a
//!   finite-difference gradient checker;
//! * [`graph`]: the multi-relation graph container, loaders, preprocessing
//!   (deduplication, self-loops, label splits) and a planted synthetic
//!   generator;
//! * [`model`]: parameters, initialization, the attention forward pass,
//!   the training loss, attention export and checkpointing;
//! * [`metrics`]: macro-averaged F1 and rank-based AUC;
//! * [`train`]: Adam, the training loop, grid search, the evaluation
//!   protocol and ablation runs.
//!
//! The `parallel` cargo feature (on by default) enables multi-threaded
//! kernels and concurrent grid trials via rayon. Every parallel loop is
//! written so results are bitwise identical to the sequential build.

pub mod diff;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod train;
