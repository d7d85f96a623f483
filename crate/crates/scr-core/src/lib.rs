//! Desk-scale speech command recognition toolkit: a dilated temporal
//! convolution acoustic model trained under a confusion-aware sequence
//! criterion (CTC-based command likelihoods against a sampled confusing set),
//! a memory-lean token-passing decoder over a prefix-shared command graph,
//! and FRR/FAR/confusion evaluation on a built-in synthetic corpus.

pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lexicon;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
