//! Conditional denoising diffusion core: noise schedule, forward process,
//! the epsilon-prediction denoiser with cross-attention conditioning, the
//! joint conditional training loss, ancestral sampling, and forecasting as
//! conditional generation.

pub mod model;
pub mod sample;
pub mod schedule;
pub mod train;

pub use model::{time_embedding, ChimeModel, Denoiser, DenoiserConfig};
pub use sample::{forecast, pointwise_median, sample_conditional, sample_unconditional};
pub use schedule::{
    eps_from_x0_prediction, forward_sample, linear_schedule, posterior_mean, NoiseSchedule,
    PosteriorMeanMode,
};
pub use train::{train, train_step, Paradigm, SigmaMode, StepStats, TrainConfig, TrainPair};
