pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
