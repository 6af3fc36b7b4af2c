//! Desk-scale laboratory for greedy speculative decoding and selective
//! knowledge distillation of tiny draft language models.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod numcore;
pub mod specdec;
pub mod tinylm;

pub use error::{Error, Result};

/// Token id over a fixed vocabulary.
pub type Token = u32;
