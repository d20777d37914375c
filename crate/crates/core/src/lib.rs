//! Training and evaluation under temporal distribution shift.
//!
//! The crate bundles a small multi-label text classifier with exact
//! gradients, incremental chronological fine-tuning, continual-learning and
//! temporal-invariant strategies, the fixed-split and streaming evaluation
//! protocols, and vocabulary-drift statistics.

pub mod corpus;
pub mod drift;
pub mod error;
pub mod eval;
pub mod method;
pub mod model;
pub mod rng;
pub mod strategies;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
