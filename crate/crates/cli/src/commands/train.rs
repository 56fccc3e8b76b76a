use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use octdiff::data::{Corpus, ImageSet};
use octdiff::denoiser::{load_checkpoint, loss_trend, save_checkpoint, write_loss_csv, Trainer};
use octdiff::{ImageField, NoiseFamily, UNet};
use rayon::prelude::*;

use super::check_target;
use crate::config::{require, RunConfig};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Corpus directory written by `simulate`.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Directory for the checkpoint, loss CSV and run.json.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    /// Noise family: gamma or gaussian.
    #[arg(long)]
    family: Option<NoiseFamily>,
    #[arg(long)]
    seed: Option<u64>,
    /// Save a checkpoint every N iterations (0 = only at the end).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Corpus set to learn from: avg, clean or noisy.
    #[arg(long)]
    train_set: Option<ImageSet>,
    /// Channel widths of the three levels, e.g. 8,16,32.
    #[arg(long, value_parser = parse_widths)]
    widths: Option<[usize; 3]>,
    /// Number of diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Overwrite an existing checkpoint in the output directory.
    #[arg(long)]
    force: bool,
}

impl Args {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        t.iterations = self.iterations.unwrap_or(t.iterations);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        t.noise_family = self.family.unwrap_or(t.noise_family);
        t.seed = self.seed.unwrap_or(t.seed);
        t.checkpoint_every = self.checkpoint_every.unwrap_or(t.checkpoint_every);
        cfg.train_set = self.train_set.unwrap_or(cfg.train_set);
        cfg.network.widths = self.widths.unwrap_or(cfg.network.widths);
        cfg.schedule.steps = self.steps.unwrap_or(cfg.schedule.steps);
        cfg.jobs = self.jobs.unwrap_or(cfg.jobs);
        for (dst, src) in [
            (&mut cfg.paths.corpus, &self.corpus),
            (&mut cfg.paths.output, &self.out),
            (&mut cfg.paths.resume, &self.resume),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
    }
}

fn parse_widths(s: &str) -> Result<[usize; 3], String> {
    let w: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("{p:?} is not a width")))
        .collect::<Result<_, _>>()?;
    w.try_into().map_err(|_| "expected three comma-separated widths".to_string())
}

/// Rows of a loss CSV up to and including iteration `upto`.
fn read_losses(path: &Path, upto: usize) -> CliResult<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let parsed = line
            .split_once(',')
            .and_then(|(i, l)| Some((i.parse::<usize>().ok()?, l.parse::<f64>().ok()?)));
        let (i, l) = parsed.ok_or_else(|| CliError::data(format!("malformed row {line:?} in {}", path.display())))?;
        if i <= upto {
            rows.push((i, l));
        }
    }
    Ok(rows)
}

fn save(out: &Path, trainer: &Trainer, losses: &[(usize, f64)]) -> CliResult<()> {
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trainer.checkpoint())?;
    let tmp = out.join(format!("{LOSS_FILE}.tmp"));
    write_loss_csv(BufWriter::new(File::create(&tmp)?), losses)?;
    fs::rename(&tmp, out.join(LOSS_FILE))?;
    Ok(())
}

pub fn run(args: Args, cfg: &mut RunConfig) -> CliResult<()> {
    args.apply(cfg);
    let root = require(&cfg.paths.corpus, "corpus", "--corpus")?;
    let corpus = Corpus::open(root).map_err(|e| CliError::at(root, e))?;
    let out = require(&cfg.paths.output, "output directory", "--out")?.to_path_buf();
    let schedule = cfg.schedule.build()?;

    let (mut trainer, mut losses) = match &cfg.paths.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path).map_err(|e| CliError::at(path, e))?;
            cfg.network = *ckpt.net.config();
            let trainer = Trainer::resume(ckpt, schedule, cfg.train)?;
            let prior = out.join(LOSS_FILE);
            let losses = if prior.exists() {
                read_losses(&prior, trainer.iteration())?
            } else {
                Vec::new()
            };
            info!("resuming at iteration {} from {}", trainer.iteration(), path.display());
            (trainer, losses)
        }
        None => {
            check_target(&out.join(CHECKPOINT_FILE), args.force)?;
            let net = UNet::new(cfg.network, cfg.train.seed)?;
            (Trainer::new(net, schedule, cfg.train)?, Vec::new())
        }
    };
    let set = cfg.train_set;
    let dataset = cfg.thread_pool()?.install(|| {
        (0..corpus.len())
            .into_par_iter()
            .map(|i| corpus.load_normalized(set, i))
            .collect::<octdiff::Result<Vec<ImageField>>>()
    })?;
    cfg.save("train", &out)?;
    info!(
        "training {} model ({} parameters) on {} {set} images",
        cfg.train.noise_family,
        trainer.net().num_params(),
        dataset.len()
    );

    let start = trainer.iteration();
    let total = cfg.train.iterations;
    let log_every = (total / 20).max(1);
    let every = cfg.train.checkpoint_every;
    while !trainer.is_done() {
        let loss = trainer.step(&dataset)?;
        let it = trainer.iteration();
        losses.push((it, loss));
        if it % log_every == 0 {
            info!("iteration {it}/{total} loss {loss:.5}");
        }
        if every > 0 && it % every == 0 && it < total {
            save(&out, &trainer, &losses)?;
        }
    }
    save(&out, &trainer, &losses)?;

    println!(
        "trained {} model: iterations {}..{} -> {}",
        cfg.train.noise_family,
        start,
        trainer.iteration(),
        out.join(CHECKPOINT_FILE).display()
    );
    let values: Vec<f64> = losses.iter().map(|&(_, l)| l).collect();
    if let Some((first, last)) = loss_trend(&values) {
        let verdict = if last < first { "decreasing" } else { "not decreasing" };
        println!("loss trend: first tenth {first:.5}, last tenth {last:.5} ({verdict})");
        if last >= first {
            warn!("training loss did not decrease; check the learning rate and the corpus");
        }
    }
    Ok(())
}
