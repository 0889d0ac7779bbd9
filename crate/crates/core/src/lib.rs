//! Text- and image-conditioned style transfer on a synthetic artist dataset.
//!
//! A frozen hand-crafted joint embedding stands in for a pretrained
//! vision-language model, a small conv autoencoder carries content, and a
//! stack of adaLN-modulated state-space blocks injects the style embedding.

pub mod bench;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod train;

pub use error::{ClastError, Result};
