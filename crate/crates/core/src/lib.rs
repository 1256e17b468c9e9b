pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod cells;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod lm;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
