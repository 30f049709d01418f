pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod fit_loss;
pub mod nets;
pub mod matching;
pub mod ot;
pub mod simulate;
pub mod trainer;

pub use error::{Error, Result};
