//! Command-line driver: convergence ladders, one-step truncation tests and
//! state snapshots.

pub mod config;
pub mod output;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use neld::harness::ErrorSeries;
use neld::snapshot::write_snapshot;
use neld::{equilibrate, step, ExperimentConfig, NoisePath, SchemeId};

use crate::output::{convergence_csv, truncation_csv, write_atomic, RunManifest, ORD_NOTE};

#[derive(Debug, Parser)]
#[command(name = "neld", version, about = "Strong-convergence benchmarks for nonequilibrium Langevin integrators")]
pub struct Cli {
    /// Experiment config (`key = value` lines); desk defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Comma-separated scheme list, e.g. `em,se_a`.
    #[arg(long, global = true)]
    pub scheme: Option<String>,

    #[arg(long, global = true)]
    pub runs: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for independent runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[arg(long, global = true, env = "NELD_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coupled step-size ladders; one CSV per scheme.
    Converge,
    /// One-step error against the reference expansion or the corrected twin.
    Truncation {
        /// Put one particle across the cell face mid-step and compare with the corrected twin.
        #[arg(long)]
        crossing: bool,
        /// Freeze the Gaussian increments at zero.
        #[arg(long)]
        deterministic_noise: bool,
    },
    /// Plain-text states of run 0 at the given times.
    Snapshot {
        /// Comma-separated times on the fine grid.
        #[arg(long, default_value = "0")]
        times: String,
    },
}

/// Bad input: malformed config, unknown scheme, impossible request.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some runs failed and were excluded.
    Partial,
    /// Every run of some scheme failed.
    Failed,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Self::Success => 0,
            Self::Failed => 1,
            Self::Partial => 3,
        }
    }
}

/// Exit code for an error returned by [`run`].
pub fn error_exit_code(err: &anyhow::Error) -> u8 {
    if err.is::<UsageError>() {
        2
    } else {
        1
    }
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            config::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(list) = &cli.scheme {
        config.schemes = config::parse_schemes(list).map_err(usage)?;
    }
    if let Some(runs) = cli.runs {
        config.runs = runs;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let config = load_config(cli)?;
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building the worker pool")?;
    let started = Instant::now();
    let mut manifest = RunManifest::new(match cli.command {
        Command::Converge => "converge",
        Command::Truncation { .. } => "truncation",
        Command::Snapshot { .. } => "snapshot",
    });
    manifest.set("seed", config.seed);
    manifest.set("threads", pool.current_num_threads());

    let outcome = pool.install(|| match &cli.command {
        Command::Converge => cmd_converge(&config, &cli.out_dir, &mut manifest),
        Command::Truncation { crossing, deterministic_noise } => {
            cmd_truncation(&config, &cli.out_dir, *crossing, *deterministic_noise, &mut manifest)
        }
        Command::Snapshot { times } => cmd_snapshot(&config, &cli.out_dir, times, &mut manifest),
    })?;

    manifest.set("wall_time_seconds", format!("{:.3}", started.elapsed().as_secs_f64()));
    manifest.echo_config(&config::render(&config));
    let name = match cli.command {
        Command::Converge => "manifest_converge.txt",
        Command::Truncation { .. } => "manifest_truncation.txt",
        Command::Snapshot { .. } => "manifest_snapshot.txt",
    };
    manifest.write(&cli.out_dir.join(name)).context("writing the manifest")?;
    Ok(outcome)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NaN".to_string(), |v| format!("{v:.4}"))
}

pub fn cmd_converge(config: &ExperimentConfig, out_dir: &Path, manifest: &mut RunManifest) -> Result<Outcome> {
    let reports = neld::convergence_experiment(config)?;
    let mut outputs = Vec::new();
    let mut outcome = Outcome::Success;
    for report in &reports {
        let name = format!("{}.csv", report.scheme);
        write_atomic(&out_dir.join(&name), &convergence_csv(report)).with_context(|| format!("writing {name}"))?;
        outputs.push(name);

        let key = report.scheme.name();
        let ord_q = report.time_median_ord(ErrorSeries::MeanQ, 0);
        let ord_p = report.time_median_ord(ErrorSeries::MeanP, 0);
        let spread = report.run_spread(0);
        manifest.set(format!("summary.{key}.runs_completed"), report.runs_completed());
        manifest.set(format!("summary.{key}.ord_q_median"), fmt_opt(ord_q));
        manifest.set(format!("summary.{key}.ord_p_median"), fmt_opt(ord_p));
        manifest.set(format!("summary.{key}.run_spread"), fmt_opt(spread));
        let failures: Vec<String> = report.failures.iter().map(|f| format!("run {}: {}", f.run, f.message)).collect();
        manifest.set(
            format!("failures.{key}"),
            if failures.is_empty() { "none".to_string() } else { failures.join("; ") },
        );
        println!(
            "{key:<8} ord_q {} ord_p {} spread {} runs {}/{}",
            fmt_opt(ord_q),
            fmt_opt(ord_p),
            fmt_opt(spread),
            report.runs_completed(),
            report.runs_requested
        );
        for f in &report.failures {
            eprintln!("{key}: run {} excluded: {}", f.run, f.message);
        }
        if report.runs_completed() == 0 {
            outcome = Outcome::Failed;
        } else if !report.failures.is_empty() && outcome == Outcome::Success {
            outcome = Outcome::Partial;
        }
    }
    manifest.set("outputs", outputs.join(","));
    manifest.set("ord_note", ORD_NOTE);
    Ok(outcome)
}

pub fn cmd_truncation(
    config: &ExperimentConfig,
    out_dir: &Path,
    crossing: bool,
    deterministic: bool,
    manifest: &mut RunManifest,
) -> Result<Outcome> {
    let mut outputs = Vec::new();
    for &scheme in &config.schemes {
        let report = neld::truncation_experiment(config, scheme, crossing, deterministic)
            .with_context(|| format!("truncation test for {scheme}"))?;
        let mut name = format!("truncation_{scheme}");
        if crossing {
            name.push_str("_crossing");
        }
        if deterministic {
            name.push_str("_deterministic");
        }
        name.push_str(".csv");
        write_atomic(&out_dir.join(&name), &truncation_csv(&report)).with_context(|| format!("writing {name}"))?;
        outputs.push(name);
        let (slope, residual) = report.fit.map_or((None, None), |f| (Some(f.slope), Some(f.residual)));
        manifest.set(format!("slope.{scheme}"), fmt_opt(slope));
        manifest.set(format!("residual.{scheme}"), fmt_opt(residual));
        println!("{scheme:<8} slope {} residual {}", fmt_opt(slope), fmt_opt(residual));
    }
    manifest.set("crossing", crossing);
    manifest.set("deterministic_noise", deterministic);
    manifest.set("outputs", outputs.join(","));
    Ok(Outcome::Success)
}

/// Fine-grid step indices for the requested times.
fn snapshot_steps(config: &ExperimentConfig, times: &str) -> Result<Vec<(f64, usize)>> {
    times
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let t: f64 = s.parse().map_err(|e| usage(format!("time '{s}': {e}")))?;
            let k = (t / config.dt_base).round();
            if !(t >= 0.0) || (k * config.dt_base - t).abs() > 1e-9 * t.max(config.dt_base) {
                return Err(usage(format!("time {t} is not on the fine grid of step {}", config.dt_base)));
            }
            if t > config.t_end * (1.0 + 1e-12) {
                return Err(usage(format!("time {t} is beyond simulation_time {}", config.t_end)));
            }
            Ok((t, k as usize))
        })
        .collect()
}

pub fn cmd_snapshot(config: &ExperimentConfig, out_dir: &Path, times: &str, manifest: &mut RunManifest) -> Result<Outcome> {
    let targets = snapshot_steps(config, times)?;
    if targets.is_empty() {
        return Err(usage("no snapshot times given"));
    }
    let scheme = config.schemes[0];
    if scheme == SchemeId::Reference {
        return Err(usage("snapshots need an integrator, not the reference expansion"));
    }
    let params = config.params()?;
    let lattice = config.lattice()?;
    let (eq_seed, noise_seed) = config.run_seeds(0);
    let mut state = equilibrate(config, eq_seed)?;
    let last = targets.iter().map(|&(_, k)| k).max().unwrap_or(0);
    let path = NoisePath::sample(noise_seed, config.dt_base, last.max(1), state.dim())?;

    let mut outputs = Vec::new();
    let mut k = 0;
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by_key(|&i| targets[i].1);
    for i in order {
        let (t, target) = targets[i];
        while k < target {
            let mut noise = path.step(k);
            if scheme.uses_ou_noise() {
                noise.xi = Some(path.ou_noise_steps(k, 1, params.gamma()));
            }
            step(scheme, &mut state, &params, &lattice, &noise)?;
            k += 1;
            state.t = k as f64 * config.dt_base;
        }
        let mut shown = state.clone();
        lattice.wrap_state(&mut shown)?;
        let name = format!("snapshot_{i:03}.txt");
        let mut text = Vec::new();
        write_snapshot(&mut text, &shown, &lattice)?;
        write_atomic(&out_dir.join(&name), std::str::from_utf8(&text)?).with_context(|| format!("writing {name}"))?;
        manifest.set(format!("snapshot.{name}"), t);
        println!("{name} t = {t}");
        outputs.push(name);
    }
    manifest.set("scheme", scheme);
    manifest.set("outputs", outputs.join(","));
    Ok(Outcome::Success)
}
