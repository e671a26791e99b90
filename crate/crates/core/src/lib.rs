pub mod error;
pub mod baselines;
pub mod control;
pub mod eval;
pub mod generator;
pub mod grid;
pub mod obs;
pub mod path;
pub mod scenario;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
