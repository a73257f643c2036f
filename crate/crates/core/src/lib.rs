//! Streaming, text-steerable body-motion synthesis at desk scale.
//!
//! The pipeline: a strictly causal temporal VAE compresses D-channel
//! motion into 4-channel latents at a quarter of the frame rate; a small
//! transformer predicts flow-matching velocities for the frames of a
//! sliding active window under a lower-triangular per-frame noise
//! schedule; a streaming engine advances the window with Euler steps,
//! committing frames as their noise level saturates and decoding them
//! incrementally. Prompts switch mid-stream through frame-wise biased
//! attention masks.
//!
//! The numeric core is generic over the scalar type; production paths use
//! the `f32` aliases below, gradient checks instantiate `f64`.

pub mod error;
pub mod denoiser;
pub mod features;
pub mod motion;
pub mod num;
pub mod schedule;
pub mod vae;

pub use error::{FloodError, Result};

/// Working precision of trained artifacts and streams.
pub type Real = f32;
pub type Tensor = num::tensor::Tensor<Real>;
pub type Tape = num::tape::Tape<Real>;
pub use num::rng::Rng;
