//! Command-line interface: one subcommand per pipeline stage.
//!
//! One dataset feeds many training runs: `simulate` and `embed` produce
//! `traj.csv` and `dataset.json/.bin` from the configured simulation seed,
//! while `train`/`eval`/`report` fan out over run seeds
//! (`ckpt_seed{S}.json/.bin`, `trace_seed{S}.csv`, `report_seed{S}.json`,
//! per-seed curves and plots, then `aggregate.json/.svg`). Artifacts live
//! in the output directory under these fixed names, so the stages compose
//! without explicit path plumbing.
//!
//! Failures print one machine-readable JSON line to stderr
//! (`{"kind": ..., "message": ...}`) and exit with the error's code.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::artifact::{self, CheckpointMeta};
use crate::config::{self, PipelineConfig};
use crate::error::{Error, Result};
use crate::estimator::remote::{protocol_check, EchoServer, DEFAULT_TIMEOUT};
use crate::eval;
use crate::plot;
use crate::sde::{double_well_system, euler_maruyama};
use crate::training;

/// Environment variable overriding the estimator endpoint. When set, every
/// command that estimates fields talks to this remote service instead of
/// the built-in kernel estimator.
pub const ENDPOINT_ENV: &str = "LATENT_SDE_ESTIMATOR_ENDPOINT";

#[derive(Parser, Debug)]
#[command(
    name = "latent-sde",
    version,
    about = "Recover latent stochastic dynamics from synthetic video: \
             simulate, embed, train, eval, report."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config file; built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory override (default from config, `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run seeds for train/eval/report: a single seed `7`, a comma list
    /// `0,3,9`, or an inclusive range `0..9` (ten seeds). Defaults to the
    /// config's seed list. Simulation uses `sim.seed`, not this list.
    #[arg(long, global = true, value_name = "LIST")]
    seeds: Option<String>,

    /// Dotted config override, repeatable: `--set train.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the latent double-well trajectory (seeded by `sim.seed`).
    Simulate {
        /// Shorthand for `--set sim.n_steps=N`.
        #[arg(long)]
        steps: Option<usize>,
        /// Shorthand for `--set sim.dt=X`.
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Render the trajectory into a Gaussian-blob video dataset.
    Embed,
    /// Train the encoder-decoder once per run seed, seeds in parallel.
    Train,
    /// Score each seed's checkpoint: alignment, metrics, curves, overlay.
    Eval,
    /// Aggregate per-seed reports into a summary JSON and a band plot.
    Report,
    /// Handshake with a remote estimator; uses the bundled echo double
    /// when no endpoint is given.
    ProtocolCheck {
        #[arg(long)]
        endpoint: Option<String>,
    },
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let line = serde_json::json!({ "kind": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            e.exit_code()
        }
    }
}

/// All artifact paths belonging to one run seed.
pub struct SeedPaths {
    pub checkpoint: PathBuf,
    pub trace: PathBuf,
    pub loss_svg: PathBuf,
    pub report: PathBuf,
    pub curves: PathBuf,
    pub overlay: PathBuf,
}

impl SeedPaths {
    pub fn new(dir: &Path, seed: u64) -> Self {
        SeedPaths {
            checkpoint: dir.join(format!("ckpt_seed{seed}.json")),
            trace: dir.join(format!("trace_seed{seed}.csv")),
            loss_svg: dir.join(format!("loss_seed{seed}.svg")),
            report: dir.join(format!("report_seed{seed}.json")),
            curves: dir.join(format!("curves_seed{seed}.csv")),
            overlay: dir.join(format!("overlay_seed{seed}.svg")),
        }
    }
}

/// The simulated-trajectory CSV shared by all run seeds.
pub fn trajectory_path(dir: &Path) -> PathBuf {
    dir.join("traj.csv")
}

/// The embedded-dataset header shared by all run seeds.
pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join("dataset.json")
}

pub fn aggregate_json_path(dir: &Path) -> PathBuf {
    dir.join("aggregate.json")
}

pub fn aggregate_svg_path(dir: &Path) -> PathBuf {
    dir.join("aggregate.svg")
}

fn seed_err(seed: u64, e: Error) -> Error {
    let wrap = |m: String| format!("seed {seed}: {m}");
    match e {
        Error::Config(m) => Error::Config(wrap(m)),
        Error::Numeric(m) => Error::Numeric(wrap(m)),
        Error::Collapse(m) => Error::Collapse(wrap(m)),
        Error::Io(m) => Error::Io(wrap(m)),
        Error::Protocol(m) => Error::Protocol(wrap(m)),
    }
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::ProtocolCheck { endpoint } = &cli.command {
        return cmd_protocol_check(endpoint.as_deref());
    }

    let mut sets = cli.sets.clone();
    if let Command::Simulate { steps, dt } = &cli.command {
        if let Some(s) = steps {
            sets.push(format!("sim.n_steps={s}"));
        }
        if let Some(d) = dt {
            sets.push(format!("sim.dt={d}"));
        }
    }
    let mut cfg = config::load_config(cli.config.as_deref(), &sets)?;
    cfg.override_endpoint(std::env::var(ENDPOINT_ENV).ok().as_deref());
    if let Some(out) = cli.out {
        cfg.output.dir = out;
    }
    let seeds = match &cli.seeds {
        Some(list) => config::parse_seed_list(list)?,
        None => cfg.seeds.clone(),
    };
    std::fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io(&cfg.output.dir, e))?;

    match cli.command {
        Command::Simulate { .. } => cmd_simulate(&cfg),
        Command::Embed => cmd_embed(&cfg),
        Command::Train => cmd_train(&cfg, &seeds),
        Command::Eval => cmd_eval(&cfg, &seeds),
        Command::Report => cmd_report(&cfg, &seeds),
        Command::ProtocolCheck { .. } => unreachable!("handled above"),
    }
}

/// Errors when an input artifact declares a different config hash than the
/// one in effect. Inputs without a recorded hash are accepted.
fn check_hash(current: &str, found: Option<&str>, what: &str, path: &Path) -> Result<()> {
    if let Some(found) = found {
        if found != current {
            return Err(Error::Config(format!(
                "{}: {what} was produced by config {found}, but the current config hashes \
                 to {current}; rerun upstream stages or restore the original config",
                path.display()
            )));
        }
    }
    Ok(())
}

fn write_svg(path: &Path, svg: String, config_hash: Option<&str>) -> Result<()> {
    let mut text = svg;
    if let Some(hash) = config_hash {
        // Trailing XML comment; valid after the document element.
        text.push_str(&format!("<!-- config={hash} -->\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_simulate(cfg: &PipelineConfig) -> Result<()> {
    let traj = euler_maruyama(&double_well_system(), &cfg.sim)?;
    let path = trajectory_path(&cfg.output.dir);
    artifact::save_trajectory_csv(&traj, &path, Some(&cfg.hash()))?;
    println!("wrote {} ({} states)", path.display(), traj.len());
    Ok(())
}

fn cmd_embed(cfg: &PipelineConfig) -> Result<()> {
    let hash = cfg.hash();
    let traj_path = trajectory_path(&cfg.output.dir);
    let (traj, traj_hash) = artifact::load_trajectory_csv(&traj_path)?;
    check_hash(&hash, traj_hash.as_deref(), "trajectory", &traj_path)?;
    let dataset = crate::embedding::embed_trajectory(&traj, &cfg.blob)?;
    let path = dataset_path(&cfg.output.dir);
    artifact::save_dataset(&dataset, &path, Some(&hash))?;
    println!(
        "wrote {} ({} frames of {}x{})",
        path.display(),
        dataset.n_frames(),
        dataset.grid_h(),
        dataset.grid_w()
    );
    Ok(())
}

fn cmd_train(cfg: &PipelineConfig, seeds: &[u64]) -> Result<()> {
    let hash = cfg.hash();
    let ds_path = dataset_path(&cfg.output.dir);
    let (dataset, ds_hash) = artifact::load_dataset(&ds_path)?;
    check_hash(&hash, ds_hash.as_deref(), "dataset", &ds_path)?;
    let dataset = &dataset;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    for chunk in seeds.chunks(workers.max(1)) {
        let results: Vec<(u64, Result<String>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let hash = &hash;
                    (seed, scope.spawn(move || train_one(cfg, dataset, seed, hash)))
                })
                .collect();
            handles
                .into_iter()
                .map(|(seed, h)| {
                    let res = h.join().unwrap_or_else(|_| {
                        Err(Error::Numeric("training worker panicked".into()))
                    });
                    (seed, res)
                })
                .collect()
        });
        for (seed, res) in results {
            let line = res.map_err(|e| seed_err(seed, e))?;
            println!("{line}");
        }
    }
    Ok(())
}

/// Trains one seed and returns its progress line; runs on a worker thread,
/// so it must not print directly (lines would interleave).
fn train_one(
    cfg: &PipelineConfig,
    dataset: &crate::embedding::VideoDataset,
    seed: u64,
    hash: &str,
) -> Result<String> {
    let paths = SeedPaths::new(&cfg.output.dir, seed);
    let train_cfg = cfg.train_for_seed(seed);
    let (params, trace) = training::train(dataset, &train_cfg)?;
    let meta = CheckpointMeta {
        seed,
        step: trace.len(),
        train: train_cfg,
        config_hash: Some(hash.to_string()),
    };
    artifact::save_checkpoint(&params, &meta, &paths.checkpoint)?;
    artifact::save_trace_csv(&trace, &paths.trace, Some(hash))?;
    let points: Vec<(usize, f64)> = trace.records.iter().map(|r| (r.step, r.loss)).collect();
    write_svg(&paths.loss_svg, plot::loss_trace_svg(&points)?, Some(hash))?;
    Ok(format!(
        "wrote {} ({} steps, loss {:.4} -> {:.4})",
        paths.checkpoint.display(),
        trace.len(),
        trace.first_loss().unwrap_or(f64::NAN),
        trace.final_loss().unwrap_or(f64::NAN),
    ))
}

fn cmd_eval(cfg: &PipelineConfig, seeds: &[u64]) -> Result<()> {
    let system = double_well_system();
    let ds_path = dataset_path(&cfg.output.dir);
    let (dataset, ds_hash) = artifact::load_dataset(&ds_path)?;
    for &seed in seeds {
        let paths = SeedPaths::new(&cfg.output.dir, seed);
        let (params, meta) =
            artifact::load_checkpoint(&paths.checkpoint).map_err(|e| seed_err(seed, e))?;
        if let (Some(ck), Some(ds)) = (&meta.config_hash, &ds_hash) {
            if ck != ds {
                return Err(Error::Config(format!(
                    "seed {seed}: config hash mismatch: checkpoint {} has {ck}, dataset {} has {ds}",
                    paths.checkpoint.display(),
                    ds_path.display()
                )));
            }
        }
        let mut report =
            eval::evaluate_run(&params, &dataset, &system, &cfg.train.estimator, &cfg.eval, seed)
                .map_err(|e| seed_err(seed, e))?;
        report.config_hash = meta.config_hash.clone().or_else(|| ds_hash.clone());
        if paths.trace.exists() {
            report.trace_ref = paths
                .trace
                .file_name()
                .map(|n| n.to_string_lossy().into_owned());
        }
        artifact::save_report(&report, &paths.report)?;
        artifact::save_curves_csv(
            &report.estimated,
            &system,
            &paths.curves,
            report.config_hash.as_deref(),
        )?;
        let svg = plot::field_overlay_svg(&report.estimated, &system)?;
        write_svg(&paths.overlay, svg, report.config_hash.as_deref())?;
        println!(
            "seed {seed}: corr {:+.4}, drift rmse {:.3}, diff rmse {:.3}, recon mse {:.3e}, \
             drift zeros {:?}",
            report.corr,
            report.drift_rmse,
            report.diff_rmse,
            report.recon_mse_per_pixel,
            report.drift_zero_crossings,
        );
    }
    Ok(())
}

fn cmd_report(cfg: &PipelineConfig, seeds: &[u64]) -> Result<()> {
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let path = SeedPaths::new(&cfg.output.dir, seed).report;
        reports.push(artifact::load_report(&path).map_err(|e| seed_err(seed, e))?);
    }
    let agg = eval::aggregate_runs(&reports)?;
    let json_path = aggregate_json_path(&cfg.output.dir);
    artifact::save_aggregate(&agg, &json_path)?;
    let svg = plot::aggregate_overlay_svg(&agg, &double_well_system())?;
    write_svg(&aggregate_svg_path(&cfg.output.dir), svg, agg.config_hash.as_deref())?;
    println!("aggregated {} runs into {}", agg.n_runs, json_path.display());
    for stat in &agg.summary {
        println!("  {}: {:.4} +/- {:.4}", stat.name, stat.mean, stat.std);
    }
    Ok(())
}

fn cmd_protocol_check(arg_endpoint: Option<&str>) -> Result<()> {
    let env_endpoint = std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|e| !e.trim().is_empty());
    match arg_endpoint.map(str::to_string).or(env_endpoint) {
        Some(endpoint) => {
            protocol_check(&endpoint, DEFAULT_TIMEOUT)?;
            println!("protocol check passed: {endpoint}");
        }
        None => {
            let server = EchoServer::spawn()?;
            let endpoint = server.endpoint();
            protocol_check(&endpoint, DEFAULT_TIMEOUT)?;
            println!("protocol check passed against the bundled echo double: {endpoint}");
        }
    }
    Ok(())
}
