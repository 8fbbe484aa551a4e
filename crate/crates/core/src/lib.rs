pub mod autodiff;
pub mod bench;
pub mod error;
pub mod image_io;
pub mod losses;
pub mod models;
pub mod mrf;
pub mod optim;
pub mod rng;
pub mod segment;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
