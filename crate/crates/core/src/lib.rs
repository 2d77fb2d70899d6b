//! EAA-Net: a three-branch segmentation network whose reconstruction branch
//! learns edge drift between neighbouring slices, trained end to end on a
//! small reverse-mode autodiff engine.

mod codec;

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
