//! Prototypical few-shot learning with semantic adaptive-margin losses.
//!
//! Episodes are drawn from a labelled dataset, embedded by a small MLP, and
//! scored against class prototypes. Training can add margins to competitor
//! logits — a constant, a linear function of semantic similarity, or the
//! output of a small network over all in-episode similarities — while
//! testing always uses the plain nearest-prototype rule.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod oracle;
pub mod semantics;
pub mod train;

pub use error::{Error, Result};
