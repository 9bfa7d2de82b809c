//! Generalized zero-shot classification by gating a seen-class expert and a
//! zero-shot expert with a confidence-based gate, plus adaptive confidence
//! smoothing, evaluation metrics and a tuning harness.

pub mod combiner;
pub mod error;
pub mod eval;
pub mod experts;
pub mod gate;
pub mod harness;
pub mod io;
pub mod optim;
pub mod score;

pub use error::{Error, Result};
