pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod grouping;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod seg_model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
