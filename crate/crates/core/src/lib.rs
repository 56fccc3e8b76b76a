//! Gamma-noise diffusion denoising for speckled OCT-like images.
//!
//! The crate covers the noise schedule and samplers, forward noising and
//! deterministic DDIM inference, a trainable noise-prediction U-Net, the
//! NLM-guided fidelity refinement, image metrics with paired significance
//! tests, and a synthetic layered phantom with multiplicative speckle.

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fidelity;
pub mod field;
pub mod metrics;
pub mod pipeline;
pub mod sampler;
pub mod schedule;

pub use denoiser::{DenoiserBackend, OracleBackend, TrainConfig, UNet, UNetConfig};
pub use diffusion::{ddim_trajectory, Fidelity, InferenceConfig, SigmaMode};
pub use error::{Error, ErrorKind, Result};
pub use fidelity::{NlmConfig, NlmParams};
pub use field::{Domain, ImageField};
pub use pipeline::{denoise, Denoised, Variant};
pub use sampler::NoiseFamily;
pub use schedule::{NoiseSchedule, ScheduleParams};
