use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{s, Array2};
use octdiff::data::{load_image, normalize, save_image};
use octdiff::{denoise, Domain, ImageField, Variant};
use rayon::prelude::*;

use super::{check_target, load_models};
use crate::config::{require, RunConfig};
use crate::error::{CliError, CliResult};

const PANEL_GAP: usize = 2;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Model checkpoint; repeat to supply both noise families.
    #[arg(long = "checkpoint", value_name = "CKPT")]
    checkpoints: Vec<PathBuf>,
    /// 8-bit grayscale PNG or a directory of them.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output file, or directory when the input is a directory.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    t_start: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Fidelity weight.
    #[arg(long)]
    mu: Option<f64>,
    /// Also write `<name>_panel.png` with input, guide and output side by side.
    #[arg(long)]
    panel: bool,
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Args {
    fn apply(&self, cfg: &mut RunConfig) {
        if !self.checkpoints.is_empty() {
            cfg.paths.checkpoints.clone_from(&self.checkpoints);
        }
        for (dst, src) in [(&mut cfg.paths.input, &self.input), (&mut cfg.paths.output, &self.out)] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        cfg.variant = self.variant.unwrap_or(cfg.variant);
        let inf = &mut cfg.inference;
        inf.t_start = self.t_start.unwrap_or(inf.t_start);
        inf.stride = self.stride.unwrap_or(inf.stride);
        inf.mu = self.mu.unwrap_or(inf.mu);
        cfg.panel |= self.panel;
        cfg.jobs = self.jobs.unwrap_or(cfg.jobs);
    }
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Pairs of (input, output) paths; a directory input maps file by file.
fn plan(input: &Path, out: &Path) -> CliResult<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.retain(|p| p.is_file() && is_png(p));
        files.sort();
        if files.is_empty() {
            return Err(CliError::data(format!("no PNG files in {}", input.display())));
        }
        fs::create_dir_all(out)?;
        return Ok(files
            .into_iter()
            .map(|f| {
                let o = out.join(f.file_name().expect("listed files have names"));
                (f, o)
            })
            .collect());
    }
    if !input.is_file() {
        return Err(CliError::data(format!("cannot read input {}", input.display())));
    }
    let o = if out.is_dir() {
        out.join(input.file_name().expect("input is a file"))
    } else {
        out.to_path_buf()
    };
    Ok(vec![(input.to_path_buf(), o)])
}

fn panel_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default();
    out.with_file_name(format!("{stem}_panel.png"))
}

/// `input | guide | output` on the 8-bit scale, separated by white gaps.
fn panel(input: &ImageField, guide: Option<&ImageField>, output: &ImageField) -> octdiff::Result<ImageField> {
    let (h, w) = input.dim();
    let mut canvas = Array2::from_elem((h, 3 * w + 2 * PANEL_GAP), 255.0);
    let blank = ImageField::filled(h, w, 0.0, Domain::Raw8Bit)?;
    let parts = [input.clone(), guide.map_or(Ok(blank), |g| normalize(g, Domain::Raw8Bit))?, output.clone()];
    for (k, part) in parts.iter().enumerate() {
        let c0 = k * (w + PANEL_GAP);
        canvas.slice_mut(s![.., c0..c0 + w]).assign(part.values());
    }
    ImageField::new(canvas, Domain::Raw8Bit)
}

pub fn run(args: Args, cfg: &mut RunConfig) -> CliResult<()> {
    args.apply(cfg);
    let input = require(&cfg.paths.input, "input", "--input")?.to_path_buf();
    let out = require(&cfg.paths.output, "output path", "--out")?.to_path_buf();
    let variant = cfg.variant;
    cfg.inference = variant.inference_config(&cfg.inference);
    let schedule = cfg.schedule.build()?;
    cfg.inference.validate(&schedule)?;
    let models = load_models(cfg, &[variant])?;
    let backend = variant.family().map(|f| &models[&f]);

    let jobs = plan(&input, &out)?;
    for (_, o) in &jobs {
        check_target(o, args.force)?;
        if cfg.panel {
            check_target(&panel_path(o), args.force)?;
        }
    }
    let run_dir = if input.is_dir() {
        out.clone()
    } else {
        jobs[0].1.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    cfg.save("denoise", &run_dir)?;

    let cfg = &*cfg;
    cfg.thread_pool()?.install(|| {
        jobs.par_iter().try_for_each(|(src, dst)| -> CliResult<()> {
            let raw = load_image(src).map_err(|e| CliError::at(src, e))?;
            let y = normalize(&raw, Domain::Normalized)?;
            let result = denoise(&y, variant, &schedule, backend, &cfg.inference, &cfg.nlm)?;
            let restored = normalize(&result.output, Domain::Raw8Bit)?;
            save_image(&restored, dst)?;
            if cfg.panel {
                save_image(&panel(&raw, result.guide.as_ref(), &restored)?, &panel_path(dst))?;
            }
            info!("{} -> {}", src.display(), dst.display());
            Ok(())
        })
    })?;
    println!("denoised {} image(s) with {variant} into {}", jobs.len(), out.display());
    Ok(())
}
