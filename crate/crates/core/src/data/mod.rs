//! Image I/O, domain conversions, synthetic phantoms and speckle pairs.

mod corpus;
mod io;
mod phantom;
mod speckle;

pub use corpus::{derive_seed, generate_sample, Corpus, CorpusManifest, ImageSet, SampleRecord, CORPUS_SCHEMA_VERSION};
pub use io::{load_image, save_image};
pub use phantom::{generate_phantom, PhantomParams};
pub use speckle::{apply_speckle, DisplayTransform, PairedSample, SpeckleParams};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};

/// Converts between value domains.
///
/// Supported pairs: 8-bit to normalized (`2 v / 255 - 1`), normalized or
/// latent to 8-bit (`255 (x + 1) / 2`, clipped), and display-transformed
/// intensity to 8-bit (`255 clip(v, 0, 1)`). No quantization happens here.
pub fn normalize(img: &ImageField, to: Domain) -> Result<ImageField> {
    let from = img.domain();
    let map = |f: fn(f64) -> f64| -> Array2<f64> { img.values().mapv(f) };
    let (values, domain) = match (from, to) {
        _ if from == to => return Ok(img.clone()),
        (Domain::Raw8Bit, Domain::Normalized) => (map(|v| 2.0 * (v / 255.0) - 1.0), Domain::Normalized),
        (Domain::Normalized | Domain::Latent, Domain::Raw8Bit) => {
            (map(|x| (255.0 * (x + 1.0) / 2.0).clamp(0.0, 255.0)), Domain::Raw8Bit)
        }
        (Domain::LinearIntensity, Domain::Raw8Bit) => (map(|v| 255.0 * v.clamp(0.0, 1.0)), Domain::Raw8Bit),
        _ => {
            return Err(Error::invalid(format!("no conversion from {from} to {to}")));
        }
    };
    ImageField::new(values, domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::rng_from_seed;
    use rand::Rng;

    #[test]
    fn endpoints_and_clipping() {
        let raw = ImageField::new(
            Array2::from_shape_fn((8, 8), |(i, _)| if i < 4 { 0.0 } else { 255.0 }),
            Domain::Raw8Bit,
        )
        .unwrap();
        let n = normalize(&raw, Domain::Normalized).unwrap();
        assert_eq!((n.values()[[0, 0]], n.values()[[7, 7]]), (-1.0, 1.0));
        let over = ImageField::filled(8, 8, 1.2, Domain::Latent).unwrap();
        assert_eq!(normalize(&over, Domain::Raw8Bit).unwrap().values()[[0, 0]], 255.0);
        let lin = ImageField::filled(8, 8, 1.4, Domain::LinearIntensity).unwrap();
        assert_eq!(normalize(&lin, Domain::Raw8Bit).unwrap().values()[[3, 3]], 255.0);
    }

    #[test]
    fn round_trip_is_exact_to_float_precision() {
        let mut rng = rng_from_seed(4);
        let raw = ImageField::new(
            Array2::from_shape_fn((17, 23), |_| rng.random_range(0.0..=255.0)),
            Domain::Raw8Bit,
        )
        .unwrap();
        let back = normalize(&normalize(&raw, Domain::Normalized).unwrap(), Domain::Raw8Bit).unwrap();
        let err = (back.values() - raw.values()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err <= 1e-12, "{err}");
    }

    #[test]
    fn unknown_pairs_are_rejected() {
        let n = ImageField::filled(8, 8, 0.0, Domain::Normalized).unwrap();
        assert!(normalize(&n, Domain::LinearIntensity).is_err());
        let lin = ImageField::filled(8, 8, 0.5, Domain::LinearIntensity).unwrap();
        assert!(normalize(&lin, Domain::Normalized).is_err());
    }
}
