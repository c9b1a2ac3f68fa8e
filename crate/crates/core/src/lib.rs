//! Attention-based neural machine translation from scratch.
//!
//! A two-layer LSTM encoder and decoder joined by global dot-product
//! attention, trained with hand-derived backpropagation through time in
//! `f64`, decoded with beam search, and scored with corpus BLEU, TER and
//! perplexity.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decode;
pub mod error;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rnn;
pub mod train;

pub use error::{Error, Result};
