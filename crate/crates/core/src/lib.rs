//! Hierarchical bidirectional-LSTM attention models for predicting
//! differential gene expression between two cell types from binned
//! histone-modification signals.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
