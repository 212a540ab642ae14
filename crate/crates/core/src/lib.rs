//! Dual prompt learning for few-shot dialogue state tracking.

pub mod cli;
pub mod corpus;
pub mod dual_trainer;
pub mod error;
pub mod eval;
pub mod inference;
pub mod lm;
pub mod prompts;
pub mod text;
pub mod value_gen;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
