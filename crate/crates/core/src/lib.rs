pub mod autograd;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
