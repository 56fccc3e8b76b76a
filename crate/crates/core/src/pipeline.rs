//! Method variants and the single-image denoising pipeline.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::data::normalize;
use crate::denoiser::DenoiserBackend;
use crate::diffusion::{ddim_trajectory, Fidelity, InferenceConfig};
use crate::error::{Error, Result};
use crate::fidelity::{nlm_fast, nrft_refine, FidelityProblem, NlmConfig, NlmParams};
use crate::field::{Domain, ImageField};
use crate::metrics::{ImageMetrics, SsimParams};
use crate::sampler::NoiseFamily;
use crate::schedule::NoiseSchedule;

/// The compared methods: noise model crossed with fidelity guide, plus the
/// filter alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Gard,
    Ddgm,
    DdgmCpdm,
    Ddpm,
    DdpmCpdm,
    DdpmNrft,
    NlmOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Gard,
        Variant::Ddgm,
        Variant::DdgmCpdm,
        Variant::Ddpm,
        Variant::DdpmCpdm,
        Variant::DdpmNrft,
        Variant::NlmOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gard => "gard",
            Variant::Ddgm => "ddgm",
            Variant::DdgmCpdm => "ddgm+cpdm",
            Variant::Ddpm => "ddpm",
            Variant::DdpmCpdm => "ddpm+cpdm",
            Variant::DdpmNrft => "ddpm+nrft",
            Variant::NlmOnly => "nlm-only",
        }
    }

    /// Noise family of the model the variant needs; `None` for the filter.
    pub fn family(self) -> Option<NoiseFamily> {
        match self {
            Variant::Gard | Variant::Ddgm | Variant::DdgmCpdm => Some(NoiseFamily::Gamma),
            Variant::Ddpm | Variant::DdpmCpdm | Variant::DdpmNrft => Some(NoiseFamily::Gaussian),
            Variant::NlmOnly => None,
        }
    }

    pub fn fidelity(self) -> Fidelity {
        match self {
            Variant::Ddgm | Variant::Ddpm => Fidelity::None,
            Variant::DdgmCpdm | Variant::DdpmCpdm => Fidelity::Raw,
            Variant::Gard | Variant::DdpmNrft | Variant::NlmOnly => Fidelity::Nrft,
        }
    }

    /// Whether the variant computes the filtered guide image.
    pub fn uses_nlm(self) -> bool {
        self.fidelity() == Fidelity::Nrft
    }

    /// `cfg` with the variant's family and fidelity filled in.
    pub fn inference_config(self, cfg: &InferenceConfig) -> InferenceConfig {
        InferenceConfig {
            fidelity: self.fidelity(),
            noise_family: self.family().unwrap_or(cfg.noise_family),
            ..*cfg
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

/// Result of denoising one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    /// Restored image on the normalized scale.
    pub output: ImageField,
    /// Filtered guide, when the variant computed one.
    pub guide: Option<ImageField>,
    pub nlm: Option<NlmParams>,
}

/// Denoises a normalized observation `y` with `variant`.
///
/// Diffusion variants start the deterministic trajectory from `y` itself
/// and need a backend trained with the variant's noise family; the
/// filter-only variant ignores the backend.
pub fn denoise<B: DenoiserBackend + ?Sized>(
    y: &ImageField,
    variant: Variant,
    schedule: &NoiseSchedule,
    backend: Option<&B>,
    cfg: &InferenceConfig,
    nlm: &NlmConfig,
) -> Result<Denoised> {
    y.expect_domain(Domain::Normalized)?;
    let cfg = variant.inference_config(cfg);
    let (guide, params) = if variant.uses_nlm() {
        let params = nlm.resolve(y)?;
        info!(
            "computing NLM guide (patch {}, search {}, h {:.4}, sigma {:.4})",
            params.patch_radius, params.search_radius, params.h, params.noise_std
        );
        (Some(nlm_fast(y, &params)?), Some(params))
    } else {
        debug!("variant {variant}: no NLM guide");
        (None, None)
    };
    if variant == Variant::NlmOnly {
        let output = guide.clone().expect("filter variant computes the guide");
        return Ok(Denoised {
            output,
            guide,
            nlm: params,
        });
    }
    let backend = backend.ok_or_else(|| Error::invalid(format!("variant {variant} needs a trained model")))?;
    let anchor_guide = match cfg.fidelity {
        Fidelity::None => None,
        Fidelity::Raw => Some(y),
        Fidelity::Nrft => guide.as_ref(),
    };
    let output = ddim_trajectory(schedule, y, backend, &cfg, |x, _| {
        let g = anchor_guide.expect("fidelity hook only runs with a guide");
        nrft_refine(&FidelityProblem::new(g, x, cfg.mu))
    })?;
    Ok(Denoised {
        output,
        guide,
        nlm: params,
    })
}

/// Metrics of a normalized output against a normalized reference, on the
/// 8-bit scale.
pub fn score(id: &str, output: &ImageField, reference: &ImageField, ssim: &SsimParams) -> Result<ImageMetrics> {
    ImageMetrics::compute(
        id,
        &normalize(output, Domain::Raw8Bit)?,
        &normalize(reference, Domain::Raw8Bit)?,
        ssim,
    )
}
