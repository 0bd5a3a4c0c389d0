pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
