pub mod cwgee;
pub mod data;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod impute;
pub mod missingness;
pub mod pool;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
