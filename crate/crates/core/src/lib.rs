//! Desk-scale toolkit for adapting a multilingual masked language model to a
//! low-resource language and measuring the effect through dependency parsing.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! * [`corpus`]: cleaning, subsampling and filtering of unlabeled text.
//! * [`wordpiece`]: vocabulary training and greedy wordpiece tokenization.
//! * [`augment`]: filling reserved vocabulary slots with target-language pieces.
//! * [`mlm`]: masked-LM instance creation and (continued) pretraining.
//! * [`mix`]: scalar mixing of encoder layers into word representations.
//! * [`parser`]: biaffine dependency parser with tree decoding.
//! * [`treebank`]: CoNLL-U IO, splitting and attachment scores.
//! * [`experiment`]: multi-seed orchestration and reporting.
//!
//! Numerics are 64-bit throughout and built on a small reverse-mode
//! differentiation tape in [`autograd`].

pub mod augment;
pub mod autograd;
pub mod corpus;
pub mod decode;
pub mod encoder;
mod error;
pub mod experiment;
pub mod mix;
pub mod mlm;
pub mod optim;
pub mod par;
pub mod parser;
pub mod rng;
pub mod schedule;
pub mod synthetic;
pub mod treebank;
pub mod wordpiece;

pub use error::{Error, Result};
