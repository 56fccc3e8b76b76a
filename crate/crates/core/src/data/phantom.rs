use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};
use crate::sampler::rng_from_seed;

/// Layered retina-like phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub width: usize,
    pub height: usize,
    pub n_layers: usize,
    /// Peak boundary displacement as a fraction of the height.
    pub boundary_waviness: f64,
    pub reflectivity_range: (f64, f64),
    pub n_vessels: usize,
    /// Width (pixels) of the Gaussian edge profile at layer transitions.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            n_layers: 7,
            boundary_waviness: 0.06,
            reflectivity_range: (0.02, 0.9),
            n_vessels: 0,
            blur_sigma: 0.8,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub const MIN_SIDE: usize = 32;

    pub fn validate(&self) -> Result<()> {
        if self.width < Self::MIN_SIDE || self.height < Self::MIN_SIDE {
            return Err(Error::invalid(format!(
                "phantom must be at least {0}x{0}, got {1}x{2}",
                Self::MIN_SIDE,
                self.height,
                self.width
            )));
        }
        if !(5..=9).contains(&self.n_layers) {
            return Err(Error::invalid(format!("n_layers must lie in [5, 9], got {}", self.n_layers)));
        }
        let (lo, hi) = self.reflectivity_range;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::invalid(format!(
                "reflectivity_range must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
            )));
        }
        if !(self.boundary_waviness >= 0.0 && self.boundary_waviness <= 0.25) {
            return Err(Error::invalid("boundary_waviness must lie in [0, 0.25]"));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::invalid("blur_sigma must be finite and >= 0"));
        }
        Ok(())
    }
}

struct Wave {
    amp: f64,
    freq: f64,
    phase: f64,
}

fn waves<R: Rng>(rng: &mut R, n: usize) -> Vec<Wave> {
    (0..n)
        .map(|k| Wave {
            amp: rng.random_range(0.3..1.0) / (k + 1) as f64,
            freq: (k + 1) as f64 * rng.random_range(0.6..1.2),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        })
        .collect()
}

/// Sum of sinusoids in `[-1, 1]` at horizontal position `u` in `[0, 1]`.
fn undulation(ws: &[Wave], u: f64) -> f64 {
    let norm: f64 = ws.iter().map(|w| w.amp).sum();
    ws.iter()
        .map(|w| w.amp * (std::f64::consts::TAU * w.freq * u + w.phase).sin())
        .sum::<f64>()
        / norm
}

/// Smooth step from 0 to 1 centered at 0 with a Gaussian edge of width `sigma`.
fn edge(d: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        if d >= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        0.5 * erfc(-d / (sigma * std::f64::consts::SQRT_2))
    }
}

/// Renders a phantom in the linear-intensity domain with values in `(0, 1]`.
///
/// Layers are stacked top to bottom. Their boundaries share one low-frequency
/// undulation plus a smaller per-boundary term bounded well below the layer
/// spacing, so boundaries never cross. Adjacent layers differ in reflectivity
/// by at least a fifth of the range.
pub fn generate_phantom(p: &PhantomParams) -> Result<ImageField> {
    p.validate()?;
    let mut rng = rng_from_seed(p.seed);
    let (h, w) = (p.height as f64, p.width as f64);
    let nb = p.n_layers - 1;
    let (top, bottom) = (0.15 * h, 0.9 * h);
    let spacing = (bottom - top) / nb as f64;
    let common = waves(&mut rng, 3);
    let own: Vec<Vec<Wave>> = (0..nb).map(|_| waves(&mut rng, 2)).collect();
    let amp = p.boundary_waviness * h;
    let own_amp = amp.min(0.2 * spacing);

    let (lo, hi) = p.reflectivity_range;
    let min_step = 0.2 * (hi - lo);
    let mut refl: Vec<f64> = Vec::with_capacity(p.n_layers);
    while refl.len() < p.n_layers {
        let r = rng.random_range(lo..=hi);
        if refl.last().is_none_or(|&prev: &f64| (r - prev).abs() >= min_step) {
            refl.push(r);
        }
    }

    // (layer, cx, rx, ry); vessels sit mid-layer and follow its undulation.
    let vessels: Vec<(usize, f64, f64, f64)> = (0..p.n_vessels)
        .map(|_| {
            let cx = rng.random_range(0.1..0.9) * w;
            let layer = rng.random_range(1..nb);
            let ry = rng.random_range(0.2..0.35) * spacing;
            let rx = ry * rng.random_range(1.0..1.8);
            (layer, cx, rx, ry)
        })
        .collect();

    let boundary: Vec<Vec<f64>> = (0..nb)
        .map(|k| {
            (0..p.width)
                .map(|x| {
                    let u = (x as f64 + 0.5) / w;
                    top + k as f64 * spacing + amp * undulation(&common, u) + own_amp * undulation(&own[k], u)
                })
                .collect()
        })
        .collect();

    let values = Array2::from_shape_fn((p.height, p.width), |(y, x)| {
        let yc = y as f64 + 0.5;
        let mut v = refl[0];
        for k in 0..nb {
            v += (refl[k + 1] - refl[k]) * edge(yc - boundary[k][x], p.blur_sigma);
        }
        for &(layer, cx, rx, ry) in &vessels {
            let cy = boundary[layer][x] + 0.5 * spacing;
            let r = (((x as f64 + 0.5 - cx) / rx).powi(2) + ((yc - cy) / ry).powi(2)).sqrt();
            v *= 1.0 - 0.7 * edge(1.0 - r, p.blur_sigma.max(0.5) / rx.min(ry));
        }
        v.clamp(1e-3, 1.0)
    });
    ImageField::new(values, Domain::LinearIntensity)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Positions of local maxima of |d/dy| above `thr` along one column.
    fn edges_in_column(img: &ImageField, x: usize, thr: f64) -> usize {
        let col: Vec<f64> = img.values().column(x).to_vec();
        let d: Vec<f64> = col.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        (0..d.len())
            .filter(|&i| {
                let left = if i == 0 { 0.0 } else { d[i - 1] };
                let right = d.get(i + 1).copied().unwrap_or(0.0);
                d[i] > thr && d[i] > left && d[i] >= right
            })
            .count()
    }

    #[test]
    fn deterministic_per_seed() {
        let p = PhantomParams {
            n_vessels: 3,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate_phantom(&p).unwrap(), generate_phantom(&p).unwrap());
        let q = PhantomParams { seed: 10, ..p };
        assert_ne!(generate_phantom(&p).unwrap(), generate_phantom(&q).unwrap());
    }

    #[test]
    fn flat_boundaries_give_identical_columns() {
        let p = PhantomParams {
            n_layers: 5,
            boundary_waviness: 0.0,
            ..Default::default()
        };
        let img = generate_phantom(&p).unwrap();
        let first = img.values().column(0).to_owned();
        for c in img.values().columns() {
            assert_eq!(c, first);
        }
    }

    #[test]
    fn every_column_shows_all_boundaries() {
        for seed in 0..20 {
            for n_layers in [5, 7, 9] {
                let p = PhantomParams {
                    seed,
                    n_layers,
                    ..Default::default()
                };
                let img = generate_phantom(&p).unwrap();
                for x in 0..p.width {
                    assert_eq!(edges_in_column(&img, x, 0.01), n_layers - 1, "seed {seed} layers {n_layers} col {x}");
                }
            }
        }
    }

    #[test]
    fn values_lie_in_unit_interval() {
        let p = PhantomParams {
            n_vessels: 4,
            width: 96,
            height: 48,
            seed: 3,
            ..Default::default()
        };
        let img = generate_phantom(&p).unwrap();
        assert_eq!(img.dim(), (48, 96));
        assert!(img.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn vessels_darken_the_image() {
        let base = PhantomParams {
            seed: 5,
            ..Default::default()
        };
        let with = PhantomParams { n_vessels: 3, ..base };
        let (a, b) = (generate_phantom(&base).unwrap(), generate_phantom(&with).unwrap());
        assert!(b.values().sum() < a.values().sum());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let d = PhantomParams::default();
        for bad in [
            PhantomParams { width: 16, ..d },
            PhantomParams { n_layers: 4, ..d },
            PhantomParams { n_layers: 10, ..d },
            PhantomParams {
                reflectivity_range: (0.8, 0.2),
                ..d
            },
            PhantomParams {
                reflectivity_range: (0.0, 0.5),
                ..d
            },
            PhantomParams { blur_sigma: -1.0, ..d },
        ] {
            assert!(generate_phantom(&bad).is_err(), "{bad:?}");
        }
    }
}
