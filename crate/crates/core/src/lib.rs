pub mod cli;
pub mod data;
pub mod dcca;
pub mod dsl;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod linear_cca;
pub mod nn;
pub mod ranking;
pub(crate) mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
