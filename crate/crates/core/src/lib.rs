//! Neural machine translation with temporal attention.
//!
//! The crate bundles a small reverse-mode autodiff engine, a GRU
//! encoder–decoder with four attention variants (global, temporal,
//! coverage-embedding and local), BPE segmentation, an IBM Model-1 lexicon,
//! training, beam-search decoding and the usual evaluation metrics.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoding;
pub mod error;
pub mod layers;
pub mod lexicon;
pub mod metrics;
pub mod rng;
pub mod seq2seq;
pub mod subword;
pub mod tensor;
pub mod training;

pub use attention::{AttentionConfig, AttentionKind, TemporalHistory};
pub use autodiff::{grad_check, GradCheck, NodeId, Op, Tape};
pub use error::{Error, Result};

pub use tensor::{Scalar, Tensor};
