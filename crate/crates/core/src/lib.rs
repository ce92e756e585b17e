pub mod control;
pub mod customization;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod faceworld;
pub mod guidance;
pub mod numerics;
pub mod pipeline;
pub mod selfcheck;

pub use error::{Error, Result};
