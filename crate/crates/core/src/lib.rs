//! Core library for SceneBooth: subject-preserved scene generation in two
//! stages. A diffusion model proposes a scene layout (bounding boxes for the
//! subject and its context objects), the subject crop is pasted at its box to
//! form a conditioning image, and a second diffusion model paints the missing
//! background around it. Compositing copies the original subject pixels back,
//! so the subject survives generation bit for bit.
//!
//! Everything runs on a small reverse-mode autodiff tape over `ndarray`
//! ([`tensor`]), generic over `f32`/`f64` so training runs in single
//! precision while gradient checks run in double.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod imageio;
pub mod layout;
pub mod layoutgen;
pub mod metrics;
pub mod nn;
pub mod paintnet;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
