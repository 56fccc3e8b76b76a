//! Noise-prediction backends and training.
//!
//! A backend maps a diffusion state `x_t` and its timestep to a prediction
//! of the standardized noise it contains. [`OracleBackend`] knows the clean
//! image and answers exactly; [`UNet`] is the trainable network.

mod checkpoint;
mod kernels;
pub(crate) mod nn;
mod train;
pub mod unet;

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::field::ImageField;
use crate::schedule::NoiseSchedule;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use train::{
    loss_trend, sample_training_batch, write_loss_csv, AdamW, TrainConfig, TrainingBatch, Trainer,
    train_epsilon_model,
};
pub use unet::{UNet, UNetConfig};

/// Predicts the standardized noise in `x_t`.
///
/// Implementations must return a field of the input's shape and must be pure
/// in `(x_t, t)`; they are shared across threads at inference time.
pub trait DenoiserBackend: Send + Sync {
    fn predict(&self, x_t: &ImageField, t: usize) -> Result<Array2<f64>>;
}

impl<B: DenoiserBackend + ?Sized> DenoiserBackend for &B {
    fn predict(&self, x_t: &ImageField, t: usize) -> Result<Array2<f64>> {
        (**self).predict(x_t, t)
    }
}

/// Checked call into a backend: the timestep must be valid and the output
/// must match the input shape.
pub fn predict_noise<B: DenoiserBackend + ?Sized>(
    backend: &B,
    schedule: &NoiseSchedule,
    x_t: &ImageField,
    t: usize,
) -> Result<Array2<f64>> {
    schedule.check_timestep(t)?;
    x_t.expect_model_scale()?;
    let eps = backend.predict(x_t, t)?;
    x_t.expect_same_shape(eps.dim())?;
    Ok(eps)
}

/// Answers with the exact noise `(x_t - sqrt(alpha_bar_t) x0) / sqrt(1 - alpha_bar_t)`
/// for a known clean image `x0`.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    x0: Array2<f64>,
    alpha_bar: Vec<f64>,
}

impl OracleBackend {
    pub fn new(schedule: &NoiseSchedule, x0: ImageField) -> Result<Self> {
        x0.expect_model_scale()?;
        Ok(Self {
            x0: x0.into_values(),
            alpha_bar: schedule.alpha_bars().to_vec(),
        })
    }
}

impl DenoiserBackend for OracleBackend {
    fn predict(&self, x_t: &ImageField, t: usize) -> Result<Array2<f64>> {
        x_t.expect_same_shape(self.x0.dim())?;
        let ab = *self
            .alpha_bar
            .get(t.wrapping_sub(1))
            .ok_or(Error::TimestepOutOfRange {
                t,
                max: self.alpha_bar.len(),
            })?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(Zip::from(x_t.values())
            .and(&self.x0)
            .map_collect(|&x, &c| (x - a * c) / s))
    }
}

impl DenoiserBackend for UNet {
    fn predict(&self, x_t: &ImageField, t: usize) -> Result<Array2<f64>> {
        let mut out = self.predict_batch(&[x_t.values()], &[t])?;
        Ok(out.pop().expect("one output per input"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::forward_marginal;
    use crate::field::Domain;
    use crate::schedule::ScheduleParams;

    #[test]
    fn oracle_returns_the_true_noise() {
        let s = ScheduleParams::default().build().unwrap();
        let x0 = ImageField::new(
            Array2::from_shape_fn((12, 9), |(i, j)| ((i + 2 * j) % 5) as f64 / 2.5 - 1.0),
            Domain::Normalized,
        )
        .unwrap();
        let oracle = OracleBackend::new(&s, x0.clone()).unwrap();
        for t in [1, 70, 999] {
            let (xt, eps) = forward_marginal(&s, &x0, t, t as u64).unwrap();
            let got = predict_noise(&oracle, &s, &xt, t).unwrap();
            let err = (&got - &eps.values).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-9, "t={t}: {err}");
        }
    }

    #[test]
    fn shape_and_timestep_are_checked() {
        let s = ScheduleParams::default().build().unwrap();
        let oracle = OracleBackend::new(&s, ImageField::filled(8, 8, 0.0, Domain::Normalized).unwrap()).unwrap();
        let other = ImageField::filled(8, 10, 0.0, Domain::Latent).unwrap();
        assert!(matches!(predict_noise(&oracle, &s, &other, 5), Err(Error::ShapeMismatch { .. })));
        let same = ImageField::filled(8, 8, 0.0, Domain::Latent).unwrap();
        assert!(predict_noise(&oracle, &s, &same, 0).is_err());
        assert!(predict_noise(&oracle, &s, &same, 1001).is_err());
    }

    #[test]
    fn unet_backend_preserves_shape() {
        let net = UNet::new(
            UNetConfig {
                widths: [4, 8, 8],
                groups: 2,
                time_features: 8,
                embed_dim: 8,
            },
            1,
        )
        .unwrap();
        let s = ScheduleParams::default().build().unwrap();
        let x = ImageField::filled(9, 14, 0.1, Domain::Latent).unwrap();
        assert_eq!(predict_noise(&net, &s, &x, 3).unwrap().dim(), (9, 14));
    }
}
