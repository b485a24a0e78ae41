//! Depth-conditioned detection in haze: scattering-model synthesis, depth
//! pyramids, depth-conditioned kernels, scale-invariant depth supervision,
//! staged fine-tuning and detection metrics, all on a small f64 tensor core.

pub mod container;
pub mod dataset;
pub mod depth;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod haze;
pub mod imageio;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
