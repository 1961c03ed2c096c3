//! Generative open-vocabulary multi-label tagging.
//!
//! A byte-level encoder-decoder is trained to emit a label set as one
//! separator-joined sequence. Training uses either plain cross-entropy over a
//! sampled label order or the multi-softmax loss, which credits any token that
//! continues a not-yet-emitted gold label. Predictions are decoded greedily or
//! by beam search with marginal label scores, and evaluated with ranking,
//! propensity, unseen-label and soft-matching metrics.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod exec;
pub mod label_trie;
pub mod metrics;
pub mod model;
pub mod review;
pub mod synth;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
