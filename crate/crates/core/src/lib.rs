//! Consensus von Mises hidden (semi-)Markov models for animal movement.

pub mod circular;
pub mod em;
pub mod error;
pub mod explore;
pub mod filter;
pub mod hidden;
pub mod inference;
pub mod io;
pub mod model;
pub mod simulate;

pub use error::{Error, ErrorCategory, Result};
