pub mod augment;
pub mod data;
pub mod error;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
