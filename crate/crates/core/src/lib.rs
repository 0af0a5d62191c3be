pub mod cli;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
