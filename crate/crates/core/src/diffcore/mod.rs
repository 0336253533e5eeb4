//! Differentiable building blocks: tensors, deterministic RNG, linear/SwiGLU
//! layers with hand-written backward passes, Adam, and finite-difference
//! gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod rng;
pub mod tensor;
