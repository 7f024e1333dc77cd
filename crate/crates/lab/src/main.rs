//! `valley-lab`: runs configured experiments and writes reproducible artifact directories.

mod artifacts;
mod config;
mod experiments;
mod plots;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{error, info, warn};

use artifacts::{Artifacts, Manifest, Status, CONFIG_COPY, MANIFEST};
use config::ExperimentConfig;

const EXIT_RUNTIME: u8 = 1;
const EXIT_INVALID: u8 = 2;

#[derive(Parser)]
#[command(name = "valley-lab", version, about = "Noise and Hessian-spectrum experiments on loss valleys")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config, run the experiment and write its artifact directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Artifact directory; defaults to the config's `out`, then `$VALLEY_LAB_OUT/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (default: one per core).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, env = "VALLEY_LAB_OUT", default_value = "runs", hide_env_values = true)]
        out_root: PathBuf,
    },
    /// Check a config against the schema and every pre-run condition.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write tidy plot-ready CSVs under `<out>/plots`.
    EmitPlots {
        /// An artifact directory written by `run`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, out, seed, workers, out_root } => run(&config, out, seed, workers, &out_root),
        Command::Validate { config, seed } => match load(&config, seed) {
            Ok(cfg) => {
                println!("{}: valid {} config", config.display(), cfg.kind.name());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::EmitPlots { out } => match plots::emit(&out) {
            Ok(emitted) => {
                for w in &emitted.warnings {
                    warn!("{w}");
                }
                for f in &emitted.files {
                    println!("{}", out.join(f).display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                error!("{e:#}");
                ExitCode::from(EXIT_RUNTIME)
            }
        },
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ExitCode> {
    let checked = ExperimentConfig::load(path).and_then(|mut cfg| {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate().map(|_| cfg)
    });
    checked.map_err(|invalid| {
        eprintln!("invalid config {}:", path.display());
        for d in &invalid.0 {
            eprintln!("  - {d}");
        }
        ExitCode::from(EXIT_INVALID)
    })
}

fn run(path: &Path, out: Option<PathBuf>, seed: Option<u64>, workers: Option<usize>, out_root: &Path) -> ExitCode {
    let mut cfg = match load(path, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(n) = workers {
        if n == 0 {
            eprintln!("--workers must be at least 1");
            return ExitCode::from(EXIT_INVALID);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into());
    let dir = out.or_else(|| cfg.out.take()).unwrap_or_else(|| out_root.join(stem));
    cfg.out = None;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    match execute(&cfg, &base, &dir) {
        Ok(Status::Complete) => {
            info!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Ok(status) => {
            error!("experiment finished with status {status:?}; see {}", dir.join(MANIFEST).display());
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// Runs the experiment into `dir`, leaving a manifest that describes whatever happened.
fn execute(cfg: &ExperimentConfig, base: &Path, dir: &Path) -> Result<Status> {
    let started = Instant::now();
    let mut art = Artifacts::create(dir)?;
    std::fs::write(art.path(CONFIG_COPY)?, cfg.to_toml())?;
    let echo = serde_json::to_value(cfg)?;
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: sgd_valley::VERSION.into(),
        kind: cfg.kind.name().into(),
        config_hash: sgd_valley::checkpoint::spec_hash(&echo)?,
        config: echo,
        master_seed: cfg.seed,
        seeds: Default::default(),
        workers: rayon::current_num_threads(),
        wall_time_secs: 0.0,
        status: Status::Running,
        error: None,
        aborted_runs: Vec::new(),
        artifacts: Vec::new(),
    };
    write_manifest(dir, &manifest)?;

    let outcome = experiments::execute(cfg, base, &mut art);
    manifest.status = match (&outcome, art.aborted_runs.is_empty()) {
        (Err(_), _) => Status::Aborted,
        (Ok(()), true) => Status::Complete,
        (Ok(()), false) => Status::Partial,
    };
    manifest.error = outcome.err().map(|e| format!("{e:#}"));
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    manifest.seeds = art.seeds;
    manifest.aborted_runs = art.aborted_runs;
    let mut files = art.written;
    files.sort();
    files.dedup();
    manifest.artifacts = files;
    write_manifest(dir, &manifest)?;
    if let Some(e) = &manifest.error {
        error!("{e}");
    }
    Ok(manifest.status)
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
