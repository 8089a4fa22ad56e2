pub mod attention;
pub mod bench;
pub mod blocks;
pub mod check;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod pom;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tape, Tensor, Var};
