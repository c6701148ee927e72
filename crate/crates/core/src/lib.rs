//! Dual-decoder conformer toolkit for multilingual speech recognition.
//!
//! One conformer encoder feeds three heads: a CTC projection over graphemes,
//! an auxiliary phoneme decoder and a grapheme decoder that emits the
//! utterance's language label before any characters. Training combines the
//! three losses as `L = lambda * L_ctc + (1 - lambda) * L_gr + alpha * L_pr`.
//!
//! Everything runs on a small define-by-run f64 autograd engine ([`graph`])
//! so the whole model is finite-difference checkable on a laptop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::Tensor;
