//! Joint refinement of antibody heavy-chain CDR loop structures.

pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
