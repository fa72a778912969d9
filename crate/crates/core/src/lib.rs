//! Miniature masked-LM lab for attention-level contrastive training on
//! Winograd-style twin pairs.
//!
//! Layers, bottom up: [`tensor`] and [`autodiff`] (f64 tensors, tape-based
//! reverse mode), [`data`] and [`tokenizer`] (schemas, corpora, encoding),
//! [`model`] and [`checkpoint`] (encoder with exposed attention), [`losses`]
//! (candidate scoring, CA and CM), [`train`], and [`eval`].

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
