use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::io::{load_image, save_image};
use super::normalize;
use super::phantom::{generate_phantom, PhantomParams};
use super::speckle::{apply_speckle, PairedSample, SpeckleParams};
use crate::error::{Error, Result};
use crate::field::{Domain, ImageField};
use crate::sampler::substream;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// Seed for stream `index` of `base`; samples use streams `2i` and `2i + 1`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    substream(base, index).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub phantom_seed: u64,
    pub speckle_seed: u64,
}

/// Everything needed to regenerate a corpus byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub count: usize,
    pub seed: u64,
    /// Geometry and appearance; `seed` is replaced per sample.
    pub phantom: PhantomParams,
    pub speckle: SpeckleParams,
    pub samples: Vec<SampleRecord>,
}

impl CorpusManifest {
    pub fn new(count: usize, seed: u64, phantom: PhantomParams, speckle: SpeckleParams) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("corpus count must be positive"));
        }
        phantom.validate()?;
        speckle.validate()?;
        let samples = (0..count)
            .map(|i| SampleRecord {
                id: format!("{i:04}"),
                phantom_seed: derive_seed(seed, 2 * i as u64),
                speckle_seed: derive_seed(seed, 2 * i as u64 + 1),
            })
            .collect();
        Ok(Self {
            schema_version: CORPUS_SCHEMA_VERSION,
            count,
            seed,
            phantom,
            speckle,
            samples,
        })
    }

    fn check(&self) -> Result<()> {
        if self.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "corpus schema {} is not supported (expected {CORPUS_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.samples.len() != self.count {
            return Err(Error::invalid("manifest sample list does not match its count"));
        }
        self.phantom.validate()?;
        self.speckle.validate()
    }
}

/// Regenerates sample `index` of the corpus described by `manifest`.
pub fn generate_sample(manifest: &CorpusManifest, index: usize) -> Result<PairedSample> {
    let rec = manifest
        .samples
        .get(index)
        .ok_or_else(|| Error::invalid(format!("sample {index} out of range 0..{}", manifest.count)))?;
    let clean = generate_phantom(&PhantomParams {
        seed: rec.phantom_seed,
        ..manifest.phantom
    })?;
    apply_speckle(&clean, &manifest.speckle, rec.speckle_seed)
}

/// The three pixel-aligned image sets of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSet {
    Clean,
    Noisy,
    Avg,
}

impl ImageSet {
    pub const ALL: [ImageSet; 3] = [ImageSet::Clean, ImageSet::Noisy, ImageSet::Avg];

    pub fn dir_name(self) -> &'static str {
        match self {
            ImageSet::Clean => "clean",
            ImageSet::Noisy => "noisy",
            ImageSet::Avg => "avg",
        }
    }

    fn pick(self, s: &PairedSample) -> &ImageField {
        match self {
            ImageSet::Clean => &s.clean,
            ImageSet::Noisy => &s.noisy,
            ImageSet::Avg => &s.less_noisy,
        }
    }
}

impl fmt::Display for ImageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for ImageSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ImageSet::ALL
            .into_iter()
            .find(|k| k.dir_name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown image set {s:?} (clean, noisy, avg)")))
    }
}

/// A corpus directory: `{clean,noisy,avg}/NNNN.png` plus `manifest.json`.
#[derive(Debug, Clone)]
pub struct Corpus {
    root: PathBuf,
    manifest: CorpusManifest,
}

impl Corpus {
    pub const MANIFEST: &'static str = "manifest.json";

    /// Prepares `root` and writes the manifest. An existing corpus is only
    /// replaced when `force` is set.
    pub fn create(root: &Path, manifest: CorpusManifest, force: bool) -> Result<Self> {
        manifest.check()?;
        let mpath = root.join(Self::MANIFEST);
        if mpath.exists() && !force {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} exists; pass --force to overwrite", mpath.display()),
            )));
        }
        for set in ImageSet::ALL {
            fs::create_dir_all(root.join(set.dir_name()))?;
        }
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(Self::MANIFEST))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        manifest.check()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn id(&self, index: usize) -> &str {
        &self.manifest.samples[index].id
    }

    pub fn path(&self, set: ImageSet, index: usize) -> PathBuf {
        self.root.join(set.dir_name()).join(format!("{}.png", self.id(index)))
    }

    /// Generates sample `index` and writes its three images.
    pub fn write_sample(&self, index: usize) -> Result<()> {
        let sample = generate_sample(&self.manifest, index)?;
        for set in ImageSet::ALL {
            save_image(&normalize(set.pick(&sample), Domain::Raw8Bit)?, &self.path(set, index))?;
        }
        Ok(())
    }

    /// Loads one image on the 8-bit scale.
    pub fn load(&self, set: ImageSet, index: usize) -> Result<ImageField> {
        load_image(&self.path(set, index))
    }

    /// Loads one image on the model scale `[-1, 1]`.
    pub fn load_normalized(&self, set: ImageSet, index: usize) -> Result<ImageField> {
        normalize(&self.load(set, index)?, Domain::Normalized)
    }
}
