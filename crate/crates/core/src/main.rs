use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use mfggp::experiment::{self, ExperimentConfig, Mode};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CliMode {
    Forward,
    Invert,
    Tdinvert,
    Study,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Forward => Mode::Forward,
            CliMode::Invert => Mode::Invert,
            CliMode::Tdinvert => Mode::Tdinvert,
            CliMode::Study => Mode::Study,
        }
    }
}

/// Gaussian-process solver and inverse solver for mean-field games on the torus.
#[derive(Debug, Parser)]
#[command(name = "mfggp", version)]
struct Cli {
    mode: CliMode,
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for study mode.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 || rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: invalid --threads {n}");
            return ExitCode::from(1);
        }
    }
    let mut cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let out = experiment::output_dir(&cfg, cli.out.as_deref());
    match experiment::run(&cfg, cli.mode.into(), &out) {
        Ok(run) => {
            for r in &run.records {
                let errs: Vec<String> = r.errors.iter().map(|(k, v)| format!("{k}={v:.3e}")).collect();
                println!("{} seed={:?} {}", r.mode.name(), r.seed, errs.join(" "));
            }
            if let Some(s) = &run.study {
                for row in &s.rows {
                    if let Some([_, med, _]) = row.quantiles.get("m") {
                        println!("I={} median L2(m)={med:.3e} failed={}", row.observations, row.failed);
                    }
                }
            }
            println!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_solver_failure() { 2 } else { 1 })
        }
    }
}
