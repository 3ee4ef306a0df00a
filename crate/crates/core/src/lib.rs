//! Core library for multi-scale conditional time-series diffusion: tensor
//! numerics with autodiff, dataset construction, the multi-scale condition
//! encoder, the feature hallucination bank, the DDPM trainer/sampler, and the
//! evaluation metric suite.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod hallucination;
pub mod metrics;
pub mod multiscale;
pub mod numerics;

pub use error::{ChimeError, Result};
