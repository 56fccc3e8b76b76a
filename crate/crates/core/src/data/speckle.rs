use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};
use crate::sampler::{rng_from_seed, GammaSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisplayTransform {
    /// `v^(1/4)`
    FourthRoot,
    /// `1 + ln(v) / ln(1000)` clipped at 0: a 30 dB window below the peak.
    Log,
}

impl DisplayTransform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            DisplayTransform::FourthRoot => v.max(0.0).sqrt().sqrt(),
            DisplayTransform::Log => {
                if v <= 0.0 {
                    0.0
                } else {
                    (1.0 + v.ln() / 1000f64.ln()).max(0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeckleParams {
    /// Number of looks `L`; speckle is `Gamma(L, 1/L)`.
    pub looks: f64,
    pub display_transform: DisplayTransform,
    /// Realizations averaged into the less-noisy reference.
    pub averaging_count: usize,
}

impl Default for SpeckleParams {
    fn default() -> Self {
        Self {
            looks: 4.0,
            display_transform: DisplayTransform::FourthRoot,
            averaging_count: 30,
        }
    }
}

impl SpeckleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.looks > 0.0 && self.looks.is_finite()) {
            return Err(Error::invalid(format!("looks must be positive, got {}", self.looks)));
        }
        if self.averaging_count == 0 {
            return Err(Error::invalid("averaging_count must be at least 1"));
        }
        Ok(())
    }

    pub fn speckle_sampler(&self) -> Result<GammaSampler> {
        self.validate()?;
        GammaSampler::new(self.looks, 1.0 / self.looks)
    }
}

/// Pixel-aligned clean, single-look noisy and averaged images, all after
/// the display transform.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub clean: ImageField,
    pub noisy: ImageField,
    pub less_noisy: ImageField,
}

/// Multiplies `clean` by unit-mean Gamma speckle and applies the display
/// transform. The noisy image uses the first realization; the less-noisy one
/// averages `averaging_count` further independent realizations in the
/// linear domain before transforming.
pub fn apply_speckle(clean: &ImageField, sp: &SpeckleParams, seed: u64) -> Result<PairedSample> {
    clean.expect_domain(Domain::LinearIntensity)?;
    let gamma = sp.speckle_sampler()?;
    let mut rng = rng_from_seed(seed);
    let dim = clean.dim();
    let mut draws = vec![0.0; clean.len()];

    gamma.fill(&mut rng, &mut draws);
    let noisy = Zip::from(clean.values())
        .and(ArrayView2::from_shape(dim, &draws).expect("sized to the image"))
        .map_collect(|&c, &s| c * s);

    let mut acc = Array2::<f64>::zeros(dim);
    for _ in 0..sp.averaging_count {
        gamma.fill(&mut rng, &mut draws);
        Zip::from(&mut acc)
            .and(clean.values())
            .and(ArrayView2::from_shape(dim, &draws).expect("sized to the image"))
            .for_each(|a, &c, &s| *a += c * s);
    }
    let n = sp.averaging_count as f64;
    let t = sp.display_transform;
    let shown = |a: Array2<f64>| ImageField::new(a.mapv(|v| t.apply(v)), Domain::LinearIntensity);
    Ok(PairedSample {
        clean: shown(clean.values().clone())?,
        noisy: shown(noisy)?,
        less_noisy: shown(acc.mapv(|v| v / n))?,
    })
}
