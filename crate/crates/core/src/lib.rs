pub mod bi_explicit;
pub mod config;
pub mod densecrf;
pub mod error;
pub mod lattice;
pub mod permuto;
pub mod pipelines;
pub mod training;

pub use error::{Error, Result};
