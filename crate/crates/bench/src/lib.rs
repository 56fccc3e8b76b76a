//! Shared inputs for the benchmarks.

use octdiff::data::{apply_speckle, generate_phantom, normalize, PhantomParams, SpeckleParams};
use octdiff::{Domain, ImageField};

/// Clean and speckled phantom of side `side`, both on the model scale.
pub fn phantom_pair(side: usize, seed: u64) -> (ImageField, ImageField) {
    let clean = generate_phantom(&PhantomParams {
        width: side,
        height: side,
        seed,
        ..Default::default()
    })
    .expect("valid phantom parameters");
    let pair = apply_speckle(&clean, &SpeckleParams::default(), seed + 1).expect("valid speckle parameters");
    let model = |f: &ImageField| {
        let raw = normalize(f, Domain::Raw8Bit).expect("linear to 8-bit");
        normalize(&raw, Domain::Normalized).expect("8-bit to normalized")
    };
    (model(&pair.clean), model(&pair.noisy))
}
