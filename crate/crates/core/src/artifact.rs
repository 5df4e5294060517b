//! On-disk artifact formats.
//!
//! Binary-heavy artifacts (datasets, checkpoints) are stored as a JSON
//! header with a sibling `.bin` payload of raw little-endian `f64`s, so any
//! language can read them without this crate. Text artifacts are CSV (with
//! `# key=value` comment headers for trajectories) or pretty-printed JSON.
//! All writers are deterministic: saving the same value twice produces
//! byte-identical files, and `load(save(x)) == x` exactly (floats are
//! written in shortest round-trip form and parsed exactly).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{BlobConfig, VideoDataset};
use crate::error::{Error, Result};
use crate::eval::{AggregateSummary, FieldCurve, RunReport};
use crate::nn::{AutoencoderParams, MlpSpec};
use crate::sde::{SdeSystem, Trajectory};
use crate::training::{LossTrace, TrainConfig};

/// Path of the binary payload that accompanies a JSON header.
pub fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn floats_to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn bytes_to_floats(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Io(format!(
            "{}: truncated payload: {} bytes is not a whole number of f64s",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn parse_header<'a, T: Deserialize<'a>>(text: &'a str, path: &Path) -> Result<T> {
    serde_json::from_str(text)
        .map_err(|e| Error::Io(format!("{}: malformed header: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Video datasets
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    n_frames: usize,
    grid_h: usize,
    grid_w: usize,
    dt: f64,
    blob: BlobConfig,
    /// 0 when no source latent is retained.
    latent_dim: usize,
    latent_seed: Option<u64>,
    config_hash: Option<String>,
}

const DATASET_FORMAT: &str = "latent-sde/dataset/v1";

/// Writes `<path>` (JSON header) and its `.bin` payload: all frames
/// row-major in time order, then the source latent states if present.
pub fn save_dataset(ds: &VideoDataset, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        n_frames: ds.n_frames(),
        grid_h: ds.grid_h(),
        grid_w: ds.grid_w(),
        dt: ds.dt(),
        blob: ds.blob().clone(),
        latent_dim: ds.source_latent().map_or(0, |t| t.dim()),
        latent_seed: ds.source_latent().and_then(|t| t.seed()),
        config_hash: config_hash.map(str::to_string),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    write_bytes(path, text.as_bytes())?;
    let mut payload = floats_to_bytes(ds.frames().iter().copied());
    if let Some(latent) = ds.source_latent() {
        payload.extend(floats_to_bytes(latent.data().iter().copied()));
    }
    write_bytes(&payload_path(path), &payload)
}

/// Loads a dataset written by [`save_dataset`], and its config hash.
pub fn load_dataset(path: &Path) -> Result<(VideoDataset, Option<String>)> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|e| Error::Io(format!("{}: malformed header: {e}", path.display())))?;
    let header: DatasetHeader = parse_header(&text, path)?;
    if header.format != DATASET_FORMAT {
        return Err(Error::Io(format!(
            "{}: malformed header: unknown format {:?}",
            path.display(),
            header.format
        )));
    }
    let pixels = header.grid_h * header.grid_w;
    if header.blob.grid_h != header.grid_h || header.blob.grid_w != header.grid_w {
        return Err(Error::Io(format!(
            "{}: dimension mismatch: header grid {}x{} disagrees with blob config {}x{}",
            path.display(),
            header.grid_h,
            header.grid_w,
            header.blob.grid_h,
            header.blob.grid_w
        )));
    }
    let bin = payload_path(path);
    let values = bytes_to_floats(&read_bytes(&bin)?, &bin)?;
    let expected = header.n_frames * pixels + header.n_frames * header.latent_dim;
    if values.len() != expected {
        return Err(Error::Io(format!(
            "{}: truncated payload: found {} values, header implies {expected}",
            bin.display(),
            values.len()
        )));
    }
    let frame_values = header.n_frames * pixels;
    let frames =
        Array2::from_shape_vec((header.n_frames, pixels), values[..frame_values].to_vec())
            .expect("shape checked above");
    let latent = if header.latent_dim > 0 {
        Some(Trajectory::from_flat(
            header.latent_dim,
            header.dt,
            values[frame_values..].to_vec(),
            header.latent_seed,
        )?)
    } else {
        None
    };
    let ds = VideoDataset::new(frames, header.grid_h, header.grid_w, header.dt, header.blob, latent)?;
    Ok((ds, header.config_hash))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Everything about a checkpoint except the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Number of completed training steps.
    pub step: usize,
    pub train: TrainConfig,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    enc_spec: MlpSpec,
    dec_spec: MlpSpec,
    n_params: usize,
    meta: CheckpointMeta,
}

const CHECKPOINT_FORMAT: &str = "latent-sde/checkpoint/v1";

/// Writes `<path>` (JSON header) and a `.bin` payload of the flat parameter
/// vector (encoder layers then decoder, weights row-major then bias).
pub fn save_checkpoint(params: &AutoencoderParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        enc_spec: params.enc_spec().clone(),
        dec_spec: params.dec_spec().clone(),
        n_params: params.n_params(),
        meta: meta.clone(),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    write_bytes(path, text.as_bytes())?;
    write_bytes(&payload_path(path), &floats_to_bytes(params.flatten().into_iter()))
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(AutoencoderParams, CheckpointMeta)> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|e| Error::Io(format!("{}: malformed header: {e}", path.display())))?;
    let header: CheckpointHeader = parse_header(&text, path)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Io(format!(
            "{}: malformed header: unknown format {:?}",
            path.display(),
            header.format
        )));
    }
    let bin = payload_path(path);
    let flat = bytes_to_floats(&read_bytes(&bin)?, &bin)?;
    if flat.len() != header.n_params {
        return Err(Error::Io(format!(
            "{}: truncated payload: found {} parameters, header says {}",
            bin.display(),
            flat.len(),
            header.n_params
        )));
    }
    let params = AutoencoderParams::from_flat(&header.enc_spec, &header.dec_spec, &flat)?;
    Ok((params, header.meta))
}

// ---------------------------------------------------------------------------
// CSV artifacts
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal form of an `f64` (Rust's `Display`).
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Trajectory CSV: `# key=value` comment lines, then `t,x1[,x2,...]` rows.
pub fn save_trajectory_csv(
    traj: &Trajectory,
    path: &Path,
    config_hash: Option<&str>,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# dim={}", traj.dim());
    let _ = writeln!(out, "# dt={}", fmt_f64(traj.dt()));
    if let Some(seed) = traj.seed() {
        let _ = writeln!(out, "# seed={seed}");
    }
    if let Some(hash) = config_hash {
        let _ = writeln!(out, "# config={hash}");
    }
    let _ = write!(out, "t");
    for k in 0..traj.dim() {
        let _ = write!(out, ",x{}", k + 1);
    }
    let _ = writeln!(out);
    for (i, state) in traj.states().enumerate() {
        let _ = write!(out, "{}", fmt_f64(i as f64 * traj.dt()));
        for v in state {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        let _ = writeln!(out);
    }
    write_bytes(path, out.as_bytes())
}

/// Loads a trajectory CSV written by [`save_trajectory_csv`], plus the
/// config hash recorded in its comments, if any.
pub fn load_trajectory_csv(path: &Path) -> Result<(Trajectory, Option<String>)> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|e| Error::io(path, format!("not UTF-8: {e}")))?;
    let mut dim: Option<usize> = None;
    let mut dt: Option<f64> = None;
    let mut seed: Option<u64> = None;
    let mut config_hash: Option<String> = None;
    let mut data: Vec<f64> = Vec::new();
    let mut saw_header_row = false;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.trim().split_once('=') {
                match key.trim() {
                    "dim" => dim = value.trim().parse().ok(),
                    "dt" => dt = value.trim().parse().ok(),
                    "seed" => seed = value.trim().parse().ok(),
                    "config" => config_hash = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        if !saw_header_row {
            saw_header_row = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let d = dim.ok_or_else(|| Error::io(path, "missing '# dim=' comment"))?;
        if fields.len() != d + 1 {
            return Err(Error::io(
                path,
                format!("line {}: expected {} fields, found {}", ln + 1, d + 1, fields.len()),
            ));
        }
        for f in &fields[1..] {
            data.push(
                f.parse()
                    .map_err(|e| Error::io(path, format!("line {}: {e}", ln + 1)))?,
            );
        }
    }
    let dim = dim.ok_or_else(|| Error::io(path, "missing '# dim=' comment"))?;
    let dt = dt.ok_or_else(|| Error::io(path, "missing '# dt=' comment"))?;
    Ok((Trajectory::from_flat(dim, dt, data, seed)?, config_hash))
}

/// Loss-trace CSV rows: `step,loss,refresh_flag`. Wall-clock is deliberately
/// excluded so traces from identical runs are byte-identical.
pub fn save_trace_csv(trace: &LossTrace, path: &Path, config_hash: Option<&str>) -> Result<()> {
    let mut out = String::new();
    if let Some(hash) = config_hash {
        let _ = writeln!(out, "# config={hash}");
    }
    out.push_str("step,loss,refresh_flag\n");
    for r in &trace.records {
        let _ = writeln!(out, "{},{},{}", r.step, fmt_f64(r.loss), u8::from(r.refreshed));
    }
    write_bytes(path, out.as_bytes())
}

/// One parsed row of a loss-trace CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub refreshed: bool,
}

/// Loads the rows of a loss-trace CSV.
pub fn load_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|e| Error::io(path, format!("not UTF-8: {e}")))?;
    let mut rows = Vec::new();
    let mut saw_header_row = false;
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header_row {
            saw_header_row = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::io(path, format!("line {}: expected 3 fields", ln + 1)));
        }
        let parse_err = |e: &dyn std::fmt::Display| Error::io(path, format!("line {}: {e}", ln + 1));
        rows.push(TraceRow {
            step: parts[0].parse().map_err(|e| parse_err(&e))?,
            loss: parts[1].parse().map_err(|e| parse_err(&e))?,
            refreshed: parts[2] == "1",
        });
    }
    Ok(rows)
}

/// Field-curve CSV: `u,drift_true,drift_est,diffsq_true,diffsq_est`, with
/// the analytic truth evaluated on the curve's grid.
pub fn save_curves_csv(
    curve: &FieldCurve,
    system: &SdeSystem,
    path: &Path,
    config_hash: Option<&str>,
) -> Result<()> {
    curve.validate()?;
    if system.dim() != 1 {
        return Err(Error::Config("curve export supports 1D systems".into()));
    }
    let mut out = String::new();
    if let Some(hash) = config_hash {
        let _ = writeln!(out, "# config={hash}");
    }
    out.push_str("u,drift_true,drift_est,diffsq_true,diffsq_est\n");
    for (j, &u) in curve.grid.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(u),
            fmt_f64(system.drift_at(&[u])[0]),
            fmt_f64(curve.drift[j]),
            fmt_f64(system.diffusion_sq_at(&[u])[0]),
            fmt_f64(curve.diff_sq[j]),
        );
    }
    write_bytes(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// JSON artifacts
// ---------------------------------------------------------------------------

/// Pretty-printed JSON with a trailing newline; stable field order.
fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn load_json<T: for<'a> Deserialize<'a>>(path: &Path) -> Result<T> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|e| Error::io(path, format!("not UTF-8: {e}")))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Io(format!("{}: malformed report: {e}", path.display())))
}

pub fn save_report(report: &RunReport, path: &Path) -> Result<()> {
    save_json(report, path)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    load_json(path)
}

pub fn save_aggregate(summary: &AggregateSummary, path: &Path) -> Result<()> {
    save_json(summary, path)
}

pub fn load_aggregate(path: &Path) -> Result<AggregateSummary> {
    load_json(path)
}
