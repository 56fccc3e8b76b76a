//! Grayscale image fields tagged with the value domain they live in.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value domain of an [`ImageField`].
///
/// `Latent` is the unbounded working space of the diffusion process: it uses
/// the `Normalized` scale but intermediate states carry noise and may leave
/// `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// 8-bit display scale, `[0, 255]`.
    Raw8Bit,
    /// Model scale, `[-1, 1]`.
    Normalized,
    /// Non-negative linear (or display-transformed) intensity.
    LinearIntensity,
    /// Diffusion state on the normalized scale, unbounded.
    Latent,
}

impl Domain {
    fn admits(self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        match self {
            Domain::Raw8Bit => (0.0..=255.0).contains(&v),
            Domain::Normalized => (-1.0..=1.0).contains(&v),
            Domain::LinearIntensity => v >= 0.0,
            Domain::Latent => true,
        }
    }

    /// Domains that can enter the diffusion process.
    pub fn is_model_scale(self) -> bool {
        matches!(self, Domain::Normalized | Domain::Latent)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Raw8Bit => "raw8bit",
            Domain::Normalized => "normalized",
            Domain::LinearIntensity => "linear-intensity",
            Domain::Latent => "latent",
        })
    }
}

/// A 2-D grayscale field (height x width) with an explicit domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageField {
    values: Array2<f64>,
    domain: Domain,
}

impl ImageField {
    /// Smallest admissible side length.
    pub const MIN_SIDE: usize = 8;

    /// Wraps `values`, checking the side lengths and that every value is
    /// admitted by `domain`.
    pub fn new(values: Array2<f64>, domain: Domain) -> Result<Self> {
        let (h, w) = values.dim();
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(Error::ImageTooSmall {
                height: h,
                width: w,
                min_height: Self::MIN_SIDE,
                min_width: Self::MIN_SIDE,
            });
        }
        if let Some(((row, col), &value)) = values.indexed_iter().find(|(_, v)| !domain.admits(**v)) {
            return Err(Error::OutOfDomain {
                value,
                row,
                col,
                domain,
            });
        }
        Ok(Self { values, domain })
    }

    pub fn filled(height: usize, width: usize, value: f64, domain: Domain) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value), domain)
    }

    /// Latent fields only need finite values.
    pub fn latent(values: Array2<f64>) -> Result<Self> {
        Self::new(values, Domain::Latent)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// `(height, width)`
    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reinterprets a normalized field as a latent diffusion state.
    pub fn to_latent(&self) -> Result<ImageField> {
        self.expect_model_scale()?;
        Ok(Self {
            values: self.values.clone(),
            domain: Domain::Latent,
        })
    }

    /// Clamps a model-scale field into `[-1, 1]`.
    pub fn clamp_normalized(&self) -> Result<ImageField> {
        self.expect_model_scale()?;
        Ok(Self {
            values: self.values.mapv(|v| v.clamp(-1.0, 1.0)),
            domain: Domain::Normalized,
        })
    }

    pub(crate) fn expect_domain(&self, expected: Domain) -> Result<()> {
        if self.domain != expected {
            return Err(Error::DomainMismatch {
                expected,
                found: self.domain,
            });
        }
        Ok(())
    }

    pub(crate) fn expect_model_scale(&self) -> Result<()> {
        if !self.domain.is_model_scale() {
            return Err(Error::DomainMismatch {
                expected: Domain::Normalized,
                found: self.domain,
            });
        }
        Ok(())
    }

    pub(crate) fn expect_same_shape(&self, dim: (usize, usize)) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::ShapeMismatch {
                left: self.dim(),
                right: dim,
            });
        }
        Ok(())
    }

    /// Builds a field without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(values: Array2<f64>, domain: Domain) -> Self {
        debug_assert!(values.iter().all(|v| domain.admits(*v)));
        Self { values, domain }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_fields() {
        let err = ImageField::filled(7, 16, 0.0, Domain::Normalized).unwrap_err();
        assert!(matches!(err, Error::ImageTooSmall { .. }));
    }

    #[test]
    fn checks_bounded_domains() {
        assert!(ImageField::filled(8, 8, 1.5, Domain::Normalized).is_err());
        assert!(ImageField::filled(8, 8, 256.0, Domain::Raw8Bit).is_err());
        assert!(ImageField::filled(8, 8, -0.1, Domain::LinearIntensity).is_err());
        assert!(ImageField::filled(8, 8, 7.0, Domain::Latent).is_ok());
        assert!(ImageField::filled(8, 8, f64::NAN, Domain::Latent).is_err());
    }

    #[test]
    fn clamp_maps_latent_back_to_normalized() {
        let f = ImageField::filled(8, 8, 3.0, Domain::Latent).unwrap();
        let c = f.clamp_normalized().unwrap();
        assert_eq!(c.domain(), Domain::Normalized);
        assert!(c.values().iter().all(|&v| v == 1.0));
    }
}
