//! Geometric generalization analysis for feed-forward networks.
//!
//! Bregman losses and their output-layer Fisher metric, networks with
//! generalization layers (skip and dropout variants), pulled-back metrics,
//! path products and spectral-product bounds, training with per-group
//! learning rates, and the desk-scale experiment harness.

pub mod bregman;
pub mod data;
pub mod geometry;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
