pub mod attention;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod distill;
pub mod energy;
pub mod error;
pub mod layers;
pub mod model;
pub mod neuron;
pub mod param;
pub mod quant;
pub mod real;
pub mod rng;
pub mod ste;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
