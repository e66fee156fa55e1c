//! Unified generative recommendation with differentiable soft item
//! identifiers.
//!
//! A residual-quantization tokenizer maps item embeddings to hierarchical
//! code tuples; an encoder-decoder transformer generates the next item's
//! codes. Soft (probabilistic) identifiers make the whole chain
//! differentiable so both models train under one recommendation loss.

pub mod analysis;
pub mod commands;
pub mod dataset;
pub mod distill;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod nn;
pub mod recommender;
pub mod synth;
pub mod teacher;
pub mod tokenizer;
pub mod train;

#[doc(hidden)]
pub mod testing;

pub use error::{Error, Result};
