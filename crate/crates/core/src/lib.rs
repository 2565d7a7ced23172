//! Differentiable direct volume rendering with trainable transfer functions.

pub mod adjoint;
pub mod camera;
pub mod dvr;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod image;
pub mod loss;
pub mod math;
pub mod tf;
pub mod train;

pub use error::{Error, Result};
