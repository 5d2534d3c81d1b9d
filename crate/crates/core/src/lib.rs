//! Guided denoising diffusion for trajectory + pose sequences.

pub mod autodiff;
pub mod data;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod goals;
pub mod gradcheck;
pub mod metrics;
pub mod guidance;
pub mod pipeline;
pub mod projection;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use denoiser::{Conditioning, Denoiser, DenoiserConfig, DenoiserParams, PredictionTarget};
pub use error::{GmdError, Result};
pub use scalar::Scalar;
pub use schedule::{NoiseSchedule, ScheduleDescriptor, ScheduleKind};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
