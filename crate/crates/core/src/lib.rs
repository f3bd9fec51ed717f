pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod saliency;
pub mod sampler;
pub mod sparse;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
