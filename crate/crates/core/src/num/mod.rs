//! Numeric core: tensors, reverse-mode AD, RNG, Adam, checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
