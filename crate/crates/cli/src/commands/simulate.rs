use std::path::PathBuf;

use octdiff::data::{Corpus, CorpusManifest, ImageSet};
use octdiff::metrics::{psnr, Summary};
use rayon::prelude::*;

use crate::config::{require, RunConfig};
use crate::error::CliResult;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Corpus directory to create.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Speckle looks L.
    #[arg(long)]
    looks: Option<f64>,
    /// Realizations averaged into the reference set.
    #[arg(long)]
    averaging_count: Option<usize>,
    /// Image side length (square images).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Replace an existing corpus.
    #[arg(long)]
    force: bool,
}

impl Args {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.simulate;
        s.count = self.count.unwrap_or(s.count);
        s.seed = self.seed.unwrap_or(s.seed);
        let sp = &mut cfg.speckle;
        sp.looks = self.looks.unwrap_or(sp.looks);
        sp.averaging_count = self.averaging_count.unwrap_or(sp.averaging_count);
        if let Some(n) = self.size {
            cfg.phantom.width = n;
            cfg.phantom.height = n;
        }
        cfg.phantom.n_layers = self.layers.unwrap_or(cfg.phantom.n_layers);
        cfg.jobs = self.jobs.unwrap_or(cfg.jobs);
        if self.out.is_some() {
            cfg.paths.output.clone_from(&self.out);
        }
    }
}

pub fn run(args: Args, cfg: &mut RunConfig) -> CliResult<()> {
    args.apply(cfg);
    let out = require(&cfg.paths.output, "corpus directory", "--out")?.to_path_buf();
    let manifest = CorpusManifest::new(cfg.simulate.count, cfg.simulate.seed, cfg.phantom, cfg.speckle)?;
    let corpus = Corpus::create(&out, manifest, args.force)?;
    cfg.save("simulate", &out)?;

    let pool = cfg.thread_pool()?;
    let psnrs = pool.install(|| {
        (0..corpus.len())
            .into_par_iter()
            .map(|i| {
                corpus.write_sample(i)?;
                let [clean, noisy, avg] = ImageSet::ALL.map(|s| corpus.load(s, i));
                let (clean, noisy, avg) = (clean?, noisy?, avg?);
                Ok([psnr(&noisy, &clean)?, psnr(&avg, &clean)?, psnr(&noisy, &avg)?])
            })
            .collect::<octdiff::Result<Vec<_>>>()
    })?;

    let p = &cfg.phantom;
    println!(
        "corpus: {} samples ({}x{}, {} layers, L={}, {}-frame average) in {}",
        corpus.len(),
        p.height,
        p.width,
        p.n_layers,
        cfg.speckle.looks,
        cfg.speckle.averaging_count,
        out.display()
    );
    for (k, label) in ["noisy vs clean", "avg vs clean", "noisy vs avg"].iter().enumerate() {
        let s = Summary::of(psnrs.iter().map(|r| r[k]));
        println!("psnr {label:<15} {:6.2} +/- {:.2} dB", s.mean, s.std);
    }
    Ok(())
}
