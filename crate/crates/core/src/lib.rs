//! Character-level neural inflection generation.

pub mod charlm;
pub mod data;
pub mod error;
pub mod eval;
pub mod lstm;
pub mod model;
pub mod nn;
pub mod rerank;
pub mod search;
pub mod train;

pub use error::{Error, Result};
