//! Numerics foundation: dense f64 tensors, tape-based reverse-mode autodiff,
//! neural building blocks, the Adam optimizer, deterministic RNG, and the
//! checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use nn::{mlp_forward, Activation, GruCell, Linear, Mlp, MultiHeadAttention};
pub use params::ParamStore;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{matmul_host, Tensor};
