use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// CSV file; stdout when omitted (run.json then goes to the current directory).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Number of diffusion steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    theta0: Option<f64>,
}

pub fn run(args: Args, cfg: &mut RunConfig) -> CliResult<()> {
    let s = &mut cfg.schedule;
    s.steps = args.steps.unwrap_or(s.steps);
    s.beta_start = args.beta_start.unwrap_or(s.beta_start);
    s.beta_end = args.beta_end.unwrap_or(s.beta_end);
    s.theta0 = args.theta0.unwrap_or(s.theta0);
    if args.out.is_some() {
        cfg.paths.output.clone_from(&args.out);
    }
    let schedule = cfg.schedule.build()?;
    match &cfg.paths.output {
        Some(path) => {
            let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::at(path, e.into()))?);
            schedule.write_csv(&mut w)?;
            w.flush()?;
            cfg.save("schedule-dump", dir)?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            schedule.write_csv(&mut w)?;
            w.flush()?;
            cfg.save("schedule-dump", Path::new("."))?;
        }
    }
    Ok(())
}
