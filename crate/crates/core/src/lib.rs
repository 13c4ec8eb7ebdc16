pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod explain;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, ErrorKind, Result};
