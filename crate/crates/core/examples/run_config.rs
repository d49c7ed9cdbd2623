//! Runs a JSON experiment config through the library, as the CLI does, and
//! prints the per-record errors.
//!
//! Usage: `cargo run --release --example run_config <config.json> [mode] [out]`
//! with mode one of forward, invert, tdinvert, study (default: the config's mode).

use std::path::PathBuf;

use mfggp::experiment::{run, ExperimentConfig, Mode};

fn main() -> mfggp::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().expect("config path"));
    let cfg = ExperimentConfig::load(&path)?;
    let mode = match args.next().as_deref() {
        Some("forward") => Mode::Forward,
        Some("invert") => Mode::Invert,
        Some("tdinvert") => Mode::Tdinvert,
        Some("study") => Mode::Study,
        Some(other) => panic!("unknown mode {other}"),
        None => cfg.mode.expect("config has no mode; pass one"),
    };
    let out = args.next().map_or_else(|| PathBuf::from("out").join(mode.name()), PathBuf::from);

    let result = run(&cfg, mode, &out)?;
    for r in &result.records {
        println!(
            "{} seed {:?} I {:?}: errors {:?} hbar {:?} nu {:?} coupling {:?} ({:.1}s)",
            r.mode.name(),
            r.seed,
            r.observations,
            r.errors,
            r.recovered.hbar,
            r.recovered.nu,
            r.recovered.coupling,
            r.wall_clock_seconds
        );
    }
    if let Some(study) = &result.study {
        for row in &study.rows {
            println!("I={} quantiles of L2(m) {:?}", row.observations, row.quantiles["m"]);
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
