pub mod bench;
pub mod data;
pub mod error;
pub mod layers;
pub mod linalg;
pub mod model_io;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use data::Dataset;
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
