//! Forward noising, reverse samplers, the closed-form Gaussian oracle and
//! the small trainable ε-predictor.

mod denoiser;
mod oracle;
mod sampler;
mod schedule;

pub use denoiser::{train_denoiser, validation_loss, DenoiserModel, TrainConfig, TrainReport, DENOISER_ARCH};
pub use oracle::{analytic_eps, GaussianOracle};
pub use sampler::{ddim_step, ddpm_step, prose_step, reverse_chain, SamplerKind};
pub use schedule::{forward_noise, make_linear_schedule, NoiseSchedule, ScheduleConfig};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that predicts the noise component of `x_t`.
pub trait EpsModel<S: Scalar = f32>: Send + Sync {
    fn predict_eps(&self, x_t: &Tensor<S>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<S>>;
}
