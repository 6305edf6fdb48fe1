pub mod backbone;
pub mod checkpoint;
pub mod envs;
pub mod error;
pub mod heads;
pub mod kernels;
pub mod ppo;
pub mod quant;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
