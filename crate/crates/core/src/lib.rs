//! Conditional diffusion video prediction and prediction-error anomaly
//! detection.
//!
//! A denoising diffusion model is trained on normal clips to predict `k`
//! frames from `p` observed past frames. At test time each clip is predicted
//! window by window, and frames whose observation diverges from the
//! prediction (low PSNR, low regular score) are flagged as anomalous.

mod error;

pub mod numcore;
pub mod schedule;
pub mod seed;

pub use error::{Error, Result};
pub use numcore::{DType, Scalar, Tensor};
pub use schedule::{make_linear_schedule, DiffusionSchedule, NoisePredictor, ScheduleParams};
pub mod denoiser;
pub use denoiser::{DenoiserModel, UNetConfig};
pub mod data;
pub mod predictor;
pub mod scoring;
pub mod testing;
pub mod trainer;
