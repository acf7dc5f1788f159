//! Emotion-controllable talking-head generation with a conditional diffusion
//! model, a conditional expression-sequence GAN and linearity metrics for
//! intensity editing, all running on a synthetic linear face world.

pub mod denoiser;
pub mod diffusion;
pub mod edit;
pub mod error;
pub mod exprgen;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod seed;
pub mod synthworld;

pub use error::{Error, Result};
