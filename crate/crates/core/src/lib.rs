//! Joint zero-pronoun prediction and translation.
//!
//! The crate bundles a small reverse-mode autodiff engine, an
//! encoder–decoder–reconstructor translation model with a per-token ZP
//! labeler and a hierarchical discourse encoder, the alignment-based ZP
//! annotation pipeline, a synthetic pro-drop corpus generator and the
//! evaluation metrics (BLEU, ZP P/R/F1, sign test).

pub mod annotate;
pub mod autodiff;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
