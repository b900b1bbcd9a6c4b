//! Attribute-conditioned LSTM caption generation.
//!
//! The crate trains a family of five LSTM captioners that condition sentence
//! generation on image feature vectors and detected-attribute probability
//! vectors, fed into the recurrence in different placements and moments.
//! Training minimizes the sentence negative log-likelihood with plain
//! minibatch SGD; decoding is greedy or beam search over an ensemble of
//! models; scoring is corpus-level BLEU, ROUGE-L, and CIDEr-D.
//!
//! Everything is plain `f64` on the CPU. With the default `parallel` feature
//! the per-example work inside a minibatch and the per-image work inside a
//! decode pass run on rayon; reductions keep a fixed order, so results are
//! bit-identical with and without the feature.

pub mod captioner;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod gradcheck;
pub mod linalg;
pub mod lstm;
pub mod metrics;
pub mod par;
pub mod training;
pub mod vocab;

mod error;

pub use error::{Error, Result};
