//! Depth-conditioned bokeh synthesis.
//!
//! A NAF-style generator consumes an RGB image plus a blur-cue channel and is
//! trained in two stages: first against edge-aware bokeh losses, then
//! adversarially against a pair of patch critics with a gradient penalty.

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod depth;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod imageio;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
