pub mod analysis;
pub mod autograd;
pub mod cascade;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod distill;
pub mod dit;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod gradcheck;
pub mod nn;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
