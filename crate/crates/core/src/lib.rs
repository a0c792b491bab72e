pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod interpret;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{Ablation, ArchConfig, Branch, ModelConfig};
pub use error::{Error, Result};
pub use model::Dsainet;
pub use params::ParamStore;
pub use tensor::Tensor;
