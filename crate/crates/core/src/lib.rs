pub mod eda;
pub mod frontend;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod simkit;
pub mod train;
pub mod xencoder;

pub use error::{Error, Result};
pub use numeric::{Matrix, Real, Tape, Var};
