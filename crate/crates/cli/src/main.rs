//! `slowfast`: batch experiment runner for the slow-fast SDE toolkit.
//!
//! Every subcommand reads one flat configuration (TOML file, overridden
//! by flags), writes self-describing artifacts into the output directory,
//! and exits 0 on a pass, 2 when a gate fails, 1 on error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "slowfast",
    version,
    about = "Simulate slow-fast SDE systems and measure their averaging rates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment file; flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Zoo entry to run on.
    #[arg(long, global = true)]
    zoo: Option<String>,

    /// Comma-separated decreasing time-scale ladder.
    #[arg(long, global = true, value_name = "LIST")]
    epsilons: Option<String>,

    /// Slow (macro) step size.
    #[arg(long, global = true)]
    macro_dt: Option<f64>,

    /// Minimum micro substeps per macro step.
    #[arg(long, global = true)]
    micro_substeps: Option<usize>,

    /// Simulated horizon.
    #[arg(long, global = true)]
    horizon: Option<f64>,

    /// Monte Carlo paths per rung.
    #[arg(long, global = true)]
    n_mc: Option<u64>,

    /// Master seed for every noise stream.
    #[arg(long = "seed", global = true)]
    master_seed: Option<u64>,

    /// Time-scale for single-path simulation.
    #[arg(long, global = true)]
    epsilon: Option<f64>,

    /// Observation time of the weak experiment.
    #[arg(long, global = true)]
    t_probe: Option<f64>,

    /// Backward probe time for pde-limit.
    #[arg(long, global = true)]
    pde_probe_t: Option<f64>,

    /// Kink exponent for mollify-check.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Comma-separated mollification levels.
    #[arg(long, global = true, value_name = "LIST")]
    levels: Option<String>,

    /// Slow value poisson-check freezes at.
    #[arg(long, global = true)]
    freeze_y: Option<f64>,

    /// Horizon of the Poisson time integral.
    #[arg(long, global = true)]
    t_max: Option<f64>,

    /// Grid points for average and poisson-check.
    #[arg(long, global = true)]
    points: Option<usize>,

    /// Lower grid bound.
    #[arg(long, global = true)]
    grid_lo: Option<f64>,

    /// Upper grid bound.
    #[arg(long, global = true)]
    grid_hi: Option<f64>,

    /// Frozen-chain step size.
    #[arg(long, global = true)]
    chain_dt: Option<f64>,

    /// Chain time discarded before sampling.
    #[arg(long, global = true)]
    burn_in: Option<f64>,

    /// Thinned samples per measure estimate.
    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Chain steps between kept samples.
    #[arg(long, global = true)]
    thinning: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    outdir: Option<PathBuf>,

    /// Worker threads (0 = library default; SLOWFAST_WORKERS also read).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Check ellipticity and recurrence hypotheses on a zoo system.
    Validate,
    /// Run one coupled path (and its averaged partner) at fixed epsilon.
    Simulate,
    /// Tabulate averaged coefficients over a slow grid.
    Average,
    /// Fit the pathwise mean-square rate across the epsilon ladder.
    StrongRate,
    /// Fit the distributional rate across the epsilon ladder.
    WeakRate,
    /// Scan mollification error and derivative growth over levels.
    MollifyCheck,
    /// Solve the frozen Poisson equation and check its residual.
    PoissonCheck,
    /// Compare backward functionals of the coupled and averaged systems.
    PdeLimit,
}

impl Command {
    fn run(self, cfg: &ExperimentConfig) -> Result<i32> {
        match self {
            Command::Validate => commands::validate(cfg),
            Command::Simulate => commands::simulate(cfg),
            Command::Average => commands::average(cfg),
            Command::StrongRate => commands::strong_rate(cfg),
            Command::WeakRate => commands::weak_rate(cfg),
            Command::MollifyCheck => commands::mollify_check(cfg),
            Command::PoissonCheck => commands::poisson_check(cfg),
            Command::PdeLimit => commands::pde_limit(cfg),
        }
    }
}

fn parse_f64_list(field: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("field `{field}`: cannot parse '{}'", t.trim()))
        })
        .collect()
}

fn parse_u32_list(field: &str, s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .with_context(|| format!("field `{field}`: cannot parse '{}'", t.trim()))
        })
        .collect()
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! take {
        ($field:ident) => {
            if let Some(v) = &cli.$field {
                cfg.$field = v.clone();
            }
        };
    }
    take!(zoo);
    take!(macro_dt);
    take!(micro_substeps);
    take!(horizon);
    take!(n_mc);
    take!(master_seed);
    take!(epsilon);
    take!(t_probe);
    take!(pde_probe_t);
    take!(alpha);
    take!(freeze_y);
    take!(t_max);
    take!(points);
    take!(grid_lo);
    take!(grid_hi);
    take!(chain_dt);
    take!(burn_in);
    take!(samples);
    take!(thinning);
    take!(outdir);
    take!(workers);
    if let Some(s) = &cli.epsilons {
        cfg.epsilons = parse_f64_list("epsilons", s)?;
    }
    if let Some(s) = &cli.levels {
        cfg.levels = parse_u32_list("levels", s)?;
    }
    cfg.check()?;
    Ok(cfg)
}

fn worker_count(cfg: &ExperimentConfig) -> usize {
    if cfg.workers > 0 {
        return cfg.workers;
    }
    std::env::var("SLOWFAST_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let cfg = resolve(cli)?;
    let workers = worker_count(&cfg);
    if workers > 0 {
        // Results are reduced in fixed chunk order, so the pool size can
        // only change timing, never bytes.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
    cli.command.run(&cfg)
}
