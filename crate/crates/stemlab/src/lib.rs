//! Stem retrieval via joint-embedding prediction: training, evaluation, and
//! the synthetic corpus tooling around them.

pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod training;
pub mod conditioning;
pub mod corpus;
pub mod dsp;
pub mod model;
pub mod ndgrad;

pub use error::{Error, Result};
