pub mod error;
pub mod harness;
pub mod model;
pub mod objective;
pub mod optimize;
pub mod tensor;

pub use error::{Error, FormatError, Result};
