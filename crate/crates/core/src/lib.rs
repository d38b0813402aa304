pub mod analysis;
pub mod checkpoint;
pub mod container;
pub mod datagen;
pub mod diff;
pub mod error;
pub mod flow;
pub mod latent;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
