//! Latent diffusion: schedule, denoiser, training and sampling.

pub mod denoiser;
pub mod sample;
pub mod schedule;
pub mod train;

pub use denoiser::{
    denoiser_forward, timestep_embedding, DenoiserParams, LevelParams, Model, ModelConfig,
};
pub use sample::{ddpm_sample, strided_timesteps};
pub use schedule::{forward_noise, make_schedule, Schedule, ScheduleConfig};
pub use train::{train, LossRow, TrainConfig, TrainReport, LOSS_CSV_HEADER};
