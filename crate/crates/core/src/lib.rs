//! Cycle-consistent synthesis of text-to-SQL training data for unseen
//! databases, plus exact-match, execution and fuzz evaluation.

pub mod canon;
pub mod error;
pub mod schema;

pub use error::{Error, Result};
pub mod exec;
pub mod fixtures;
pub mod seed;
pub mod dist;
pub mod sampler;
pub mod fuzz;
pub mod adapter;
pub mod synth;
pub mod eval;
