//! Diffusion-model denoising of speckled tomographic b-scans.
//!
//! A noisy scan is treated as an intermediate state `x_t` of a forward
//! Gaussian diffusion and walked back to `x_0` with a learned noise
//! predictor. Training references come from self-fusion of neighbouring
//! slices; [`data::phantom`] provides synthetic speckle phantoms with known
//! ground truth.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use diffusion::{
    elbo_terms, kl_gaussian, predict_mu_from_eps, predict_x0_from_eps, q_mean_variance, q_posterior,
    q_sample, q_step_sample, ElboTerms, NoisePredictor, OraclePredictor, ZeroPredictor,
};
pub use error::{Error, Result};
pub use fusion::{fuse, fuse_volume, register, similarity_weight, Bandwidth, FusionConfig, RegistrationMethod};
pub use image::Image;
pub use nn::{EpsNet, EpsilonPredictor, NetworkConfig};
pub use sampler::{denoise, p_sample_step, sweep_t};
pub use schedule::{ScheduleSpec, VarianceSchedule};
pub use trainer::{lr_schedule, train, training_step, Checkpoint, LossWeighting, TrainConfig, Trainer};
