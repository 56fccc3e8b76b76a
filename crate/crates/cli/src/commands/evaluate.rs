use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use octdiff::data::{load_image, normalize, save_image, Corpus, ImageSet};
use octdiff::metrics::{EvaluationReport, ImageMetrics, MethodReport, Metric};
use octdiff::{denoise, Domain, ImageField, Variant};
use rayon::prelude::*;

use super::{check_target, load_models};
use crate::config::{require, RunConfig};
use crate::error::{CliError, CliResult};

/// Report name of the unprocessed observation.
pub const NOISY_INPUT: &str = "noisy-input";
pub const PER_IMAGE_FILE: &str = "per_image.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SIGNIFICANCE_FILE: &str = "significance.csv";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Test corpus written by `simulate`.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Model checkpoint; repeat to supply both noise families.
    #[arg(long = "checkpoint", value_name = "CKPT")]
    checkpoints: Vec<PathBuf>,
    /// Score existing `<variant>/<id>.png` files instead of denoising.
    #[arg(long, value_name = "DIR")]
    outputs: Option<PathBuf>,
    /// Comma-separated methods, e.g. gard,ddgm,ddgm+cpdm,nlm-only.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    /// Ground truth set: avg or clean.
    #[arg(long)]
    reference: Option<ImageSet>,
    /// Report directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite an existing report.
    #[arg(long)]
    force: bool,
}

impl Args {
    fn apply(&self, cfg: &mut RunConfig) {
        if !self.checkpoints.is_empty() {
            cfg.paths.checkpoints.clone_from(&self.checkpoints);
        }
        for (dst, src) in [
            (&mut cfg.paths.corpus, &self.corpus),
            (&mut cfg.paths.outputs, &self.outputs),
            (&mut cfg.paths.output, &self.out),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        if let Some(v) = &self.variants {
            cfg.variants.clone_from(v);
        }
        cfg.reference = self.reference.unwrap_or(cfg.reference);
        cfg.jobs = self.jobs.unwrap_or(cfg.jobs);
    }
}

fn output_path(dir: &Path, variant: Variant, id: &str) -> PathBuf {
    dir.join(variant.name()).join(format!("{id}.png"))
}

fn quantized(f: &ImageField) -> octdiff::Result<ImageField> {
    ImageField::new(normalize(f, Domain::Raw8Bit)?.values().mapv(f64::round), Domain::Raw8Bit)
}

pub fn run(args: Args, cfg: &mut RunConfig) -> CliResult<()> {
    args.apply(cfg);
    let root = require(&cfg.paths.corpus, "corpus", "--corpus")?;
    let corpus = Corpus::open(root).map_err(|e| CliError::at(root, e))?;
    let out = require(&cfg.paths.output, "report directory", "--out")?.to_path_buf();
    let mut variants = Vec::new();
    for v in &cfg.variants {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    if variants.is_empty() {
        return Err(CliError::config("no variants selected"));
    }
    cfg.variants.clone_from(&variants);
    if cfg.reference == ImageSet::Noisy {
        return Err(CliError::config("the reference set must be avg or clean"));
    }
    check_target(&out.join(SUMMARY_FILE), args.force)?;
    let schedule = cfg.schedule.build()?;
    cfg.inference.validate(&schedule)?;

    let precomputed = cfg.paths.outputs.clone();
    let models = match &precomputed {
        Some(dir) => {
            for &v in &variants {
                let missing = (0..corpus.len())
                    .map(|i| output_path(dir, v, corpus.id(i)))
                    .find(|p| !p.is_file());
                if let Some(p) = missing {
                    return Err(CliError::data(format!("missing outputs for variant {v}: {}", p.display())));
                }
            }
            Default::default()
        }
        None => {
            let models = load_models(cfg, &variants)?;
            for v in &variants {
                fs::create_dir_all(out.join(IMAGES_DIR).join(v.name()))?;
            }
            models
        }
    };
    cfg.save("evaluate", &out)?;

    let cfg = &*cfg;
    let rows = cfg.thread_pool()?.install(|| {
        (0..corpus.len())
            .into_par_iter()
            .map(|i| -> CliResult<Vec<ImageMetrics>> {
                let id = corpus.id(i);
                let y = corpus.load(ImageSet::Noisy, i)?;
                let reference = corpus.load(cfg.reference, i)?;
                let mut row = vec![ImageMetrics::compute(id, &y, &reference, &cfg.ssim)?];
                let y_norm = normalize(&y, Domain::Normalized)?;
                for &v in &variants {
                    let restored = match &precomputed {
                        Some(dir) => {
                            let p = output_path(dir, v, id);
                            load_image(&p).map_err(|e| CliError::at(&p, e))?
                        }
                        None => {
                            let backend = v.family().map(|f| &models[&f]);
                            let d = denoise(&y_norm, v, &schedule, backend, &cfg.inference, &cfg.nlm)?;
                            let q = quantized(&d.output)?;
                            save_image(&q, &output_path(&out.join(IMAGES_DIR), v, id))?;
                            q
                        }
                    };
                    row.push(ImageMetrics::compute(id, &restored, &reference, &cfg.ssim)?);
                }
                info!("scored {id}");
                Ok(row)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;

    let names = std::iter::once(NOISY_INPUT.to_string()).chain(variants.iter().map(|v| v.name().to_string()));
    let methods = names
        .enumerate()
        .map(|(k, name)| MethodReport::new(name, rows.iter().map(|r| r[k].clone()).collect()))
        .collect();
    let report = EvaluationReport::new(methods)?;
    report.write_csv(BufWriter::new(File::create(out.join(PER_IMAGE_FILE))?))?;
    report.write_significance_csv(BufWriter::new(File::create(out.join(SIGNIFICANCE_FILE))?))?;
    fs::write(out.join(SUMMARY_FILE), report.to_json()? + "\n")?;

    println!(
        "{} images, reference {}; report in {}",
        corpus.len(),
        cfg.reference,
        out.display()
    );
    println!("{:<12} {:>16} {:>16} {:>12} {:>14}", "method", "psnr (dB)", "ssim", "mse", "psnr(mean mse)");
    for m in &report.methods {
        let (p, s, e) = (&m.aggregate[&Metric::Psnr], &m.aggregate[&Metric::Ssim], &m.aggregate[&Metric::Mse]);
        println!(
            "{:<12} {:>8.2} +/- {:<5.2} {:>7.4} +/- {:<6.4} {:>12.2} {:>14.2}",
            m.method, p.mean, p.std, s.mean, s.std, e.mean, m.psnr_of_mean_mse
        );
    }
    Ok(())
}
