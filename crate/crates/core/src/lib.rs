//! Joint supervised and self-supervised (jigsaw, rotation) training for
//! domain generalization and adaptation.

pub mod data;
pub mod engine;
mod error;
pub mod model;
pub mod objectives;
pub mod permutations;
pub mod seeding;
pub mod transforms;

pub use error::{Error, Result};
