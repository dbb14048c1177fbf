//! Spearman ceiling analysis for binary similarity predictors, and a
//! two-stage contrastive + Pearson fine-tuning pipeline on synthetic
//! semantic-similarity data.

pub mod bound;
pub mod cli;
pub mod correlation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod pipeline;

pub use error::{Error, Result};
