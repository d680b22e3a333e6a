//! Uncertainty-aware super-resolution of solar magnetograms.
//!
//! The pipeline degrades high-resolution magnetograms with a known
//! smoothing-plus-block-averaging operator, trains a dropout-instrumented
//! encoder-decoder with either an MSE or a heteroskedastic Gaussian NLL
//! objective, and splits predictive variance into an epistemic part
//! (spread of MC-dropout means) and an aleatoric part (mean predicted
//! noise variance).

pub mod config;
pub mod data;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod grid;
pub mod inference;
pub mod io;
pub mod loss;
pub mod model;
pub mod plot;
pub mod provenance;
pub mod rng;
pub mod cli;

pub use error::{Error, Result};
pub use grid::Grid;
