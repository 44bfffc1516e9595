pub mod cli;
pub mod config;
pub mod csr;
pub mod data;
pub mod error;
pub mod infer;
pub mod linalg;
pub mod net;
pub mod par;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{DressError, Result};
pub use tensor::{Real, Tensor};
