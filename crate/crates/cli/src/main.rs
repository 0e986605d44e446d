//! `mpf`: particle-filter experiments for state-space models with low and
//! degenerate observation noise.
//!
//! Subcommands:
//! - `run`: one filtering experiment from a JSON config; writes
//!   runrecord.csv, diagnostics.csv, marginal dumps and manifest.json.
//! - `sweep`: all filters across a delta grid (plus the degenerate filter
//!   at delta = 0); writes sweep.csv.
//! - `prop1`: the empirical L_r-error convergence harness; writes
//!   prop1.csv.
//! - `plot`: render SVGs from any of the CSV artifacts.
//!
//! Exit codes: 0 success, 1 configuration or runtime error, 2 weight
//! collapse. `MPF_THREADS` caps the worker count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpf_core::experiments::{
    emit_plots, prop1_to_dir, run_experiment_to_dir, sweep_to_dir, ExperimentConfig, ModelId,
    Prop1Config,
};
use mpf_core::Error;

#[derive(Parser)]
#[command(
    name = "mpf",
    version,
    about = "particle filters for low and degenerate observation noise"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one filtering experiment.
    Run {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: config output_dir, else "out").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep all filters across observation-noise scales.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated delta list; falls back to the config's `deltas`,
        /// then to 1e-1..1e-12. The degenerate filter always contributes
        /// its delta = 0 row.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Empirical L_r-error convergence harness (linear Gaussian model).
    Prop1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render SVG plots from CSV artifacts.
    Plot {
        /// CSV files (runrecord, diagnostics, sweep, prop1, marginals).
        inputs: Vec<PathBuf>,
        /// Output directory (default: alongside each input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("MPF_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("warning: ignoring invalid MPF_THREADS={v}"),
        }
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))
}

fn default_sweep_grid() -> Vec<f64> {
    (1..=12).map(|k| 10f64.powi(-k)).collect()
}

fn run(cmd: Cmd) -> Result<ExitCode, Error> {
    match cmd {
        Cmd::Run { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out_dir(&cfg, out);
            let (record, written) = run_experiment_to_dir(&cfg, &dir)?;
            eprintln!(
                "run: model={} filter={} N={} delta={:e} seed={} wall={:.2?}",
                cfg.model, cfg.filter, cfg.n_particles, cfg.delta, cfg.seed, record.wall_clock
            );
            for p in &written {
                eprintln!("  wrote {}", p.display());
            }
            if let Some(n) = record.output.collapsed_at {
                eprintln!("weight collapse at step {n}; partial diagnostics written");
                return Ok(ExitCode::from(2));
            }
            eprintln!("median ESS {:.1}", record.output.median_ess());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { config, deltas, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let grid = deltas.or_else(|| cfg.deltas.clone()).unwrap_or_else(default_sweep_grid);
            let dir = out_dir(&cfg, out);
            let (result, path) = sweep_to_dir(&cfg, &grid, &dir)?;
            eprintln!("sweep: {} cells -> {}", result.rows.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Prop1 { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            if cfg.model != ModelId::Lgm {
                return Err(Error::Config(
                    "the convergence harness runs on the linear Gaussian model (model = \"lgm\")"
                        .into(),
                ));
            }
            let settings = cfg.prop1.unwrap_or_default();
            let pc = Prop1Config {
                n_particles: cfg.n_particles,
                n_steps: settings.n_steps,
                n_reps: settings.n_reps,
                r: settings.r,
                deltas: cfg.deltas.clone().unwrap_or_else(|| vec![1e-2, 1e-8]),
                seed: cfg.seed,
            };
            let dir = out_dir(&cfg, out);
            let (result, path) = prop1_to_dir(&pc, &dir)?;
            eprintln!("prop1: {} rows -> {}", result.rows.len(), path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Plot { inputs, out } => {
            if inputs.is_empty() {
                return Err(Error::Config("plot: no input files".into()));
            }
            for input in &inputs {
                let dir = out
                    .clone()
                    .unwrap_or_else(|| input.parent().unwrap_or(std::path::Path::new(".")).into());
                let written = emit_plots(std::slice::from_ref(input), &dir)?;
                for p in &written {
                    eprintln!("  wrote {}", p.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
