//! Gauge fixing and metrics.
//!
//! A learned latent coordinate is identifiable only up to an invertible
//! reparameterization; this module fixes the gauge by least-squares linear
//! alignment with the ground-truth latent, transforms estimated fields into
//! truth units (drift scales by `a`, squared diffusion by `a^2`), and
//! computes the report metrics: Pearson correlation, field RMSEs on a fixed
//! evaluation grid, drift zero crossings by sign-change bisection, and
//! autoencoder reconstruction error. Multi-seed runs aggregate into
//! mean curves with 5th/95th percentile bands.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::VideoDataset;
use crate::error::{Error, Result};
use crate::estimator::build_context;
use crate::nn::AutoencoderParams;
use crate::sde::SdeSystem;
use crate::training::EstimatorKind;

/// Linear gauge `truth ~ a * learned + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMap {
    pub a: f64,
    pub b: f64,
}

impl AlignmentMap {
    pub fn identity() -> Self {
        AlignmentMap { a: 1.0, b: 0.0 }
    }

    pub fn apply(&self, x: f64) -> f64 {
        self.a * x + self.b
    }

    /// Maps a truth-unit point back to learned units.
    pub fn preimage(&self, u: f64) -> f64 {
        (u - self.b) / self.a
    }

    pub fn inverse(&self) -> AlignmentMap {
        AlignmentMap { a: 1.0 / self.a, b: -self.b / self.a }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a == 0.0 || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::Config(format!(
                "alignment map must have finite a != 0 and finite b, got a={}, b={}",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

/// Uniform evaluation grid in truth units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { min: -1.2, max: 1.2, points: 33 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::Config("grid needs finite min < max".into()));
        }
        if self.points < 2 {
            return Err(Error::Config("grid needs at least 2 points".into()));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points).map(|j| self.min + j as f64 * step).collect()
    }
}

/// Drift and squared-diffusion values along a latent grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldCurve {
    pub grid: Vec<f64>,
    pub drift: Vec<f64>,
    pub diff_sq: Vec<f64>,
}

impl FieldCurve {
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.drift.len() || self.grid.len() != self.diff_sq.len() {
            return Err(Error::Config("field curve arrays must have equal lengths".into()));
        }
        if self
            .grid
            .iter()
            .chain(&self.drift)
            .chain(&self.diff_sq)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite value in field curve".into()));
        }
        Ok(())
    }
}

/// Evaluation knobs: grid, context budget, and context subsample seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub grid: GridSpec,
    pub max_context_pairs: usize,
    pub context_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        // The default context budget admits every pair of a 5000-frame run.
        EvalConfig { grid: GridSpec::default(), max_context_pairs: 1 << 20, context_seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.max_context_pairs < 2 {
            return Err(Error::Config("max_context_pairs must be at least 2".into()));
        }
        Ok(())
    }
}

/// Gauge-independent metrics of one latent sequence against the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMetrics {
    pub alignment: AlignmentMap,
    /// Pearson correlation of the aligned latents with the truth.
    pub corr: f64,
    pub drift_rmse: f64,
    pub diff_rmse: f64,
    /// Ascending locations where the aligned estimated drift changes sign.
    pub drift_zero_crossings: Vec<f64>,
    /// Estimated fields on the evaluation grid, truth units.
    pub estimated: FieldCurve,
}

/// Full per-seed evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub alignment: AlignmentMap,
    pub corr: f64,
    pub drift_rmse: f64,
    pub diff_rmse: f64,
    pub drift_zero_crossings: Vec<f64>,
    pub recon_mse_per_pixel: f64,
    pub estimated: FieldCurve,
    /// Path of the loss trace this run came from, if any.
    pub trace_ref: Option<String>,
    /// Hash of the pipeline config that produced the run, if any.
    pub config_hash: Option<String>,
}

/// Least-squares fit `truth ~ a * learned + b`.
pub fn align_latent(learned: &[f64], truth: &[f64]) -> Result<AlignmentMap> {
    let n = learned.len();
    if n != truth.len() || n < 2 {
        return Err(Error::Config(format!(
            "alignment needs equal-length sequences of at least 2 points, got {n} and {}",
            truth.len()
        )));
    }
    if learned.iter().chain(truth.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in alignment inputs".into()));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let ml = mean(learned);
    let mt = mean(truth);
    let mut cov = 0.0;
    let mut var = 0.0;
    for (l, t) in learned.iter().zip(truth) {
        let dl = l - ml;
        cov += dl * (t - mt);
        var += dl * dl;
    }
    if var / (n as f64) < 1e-12 {
        return Err(Error::Collapse(
            "collapsed latent: learned sequence has zero variance".into(),
        ));
    }
    let a = cov / var;
    Ok(AlignmentMap { a, b: mt - a * ml })
}

/// Pearson correlation coefficient.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::Config("correlation needs equal-length sequences >= 2".into()));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("correlation undefined for constant sequence".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Re-expresses a field curve given in learned units in truth units.
pub fn transform_field(curve: &FieldCurve, map: &AlignmentMap) -> Result<FieldCurve> {
    map.validate()?;
    curve.validate()?;
    let a_sq = map.a * map.a;
    Ok(FieldCurve {
        grid: curve.grid.iter().map(|&x| map.apply(x)).collect(),
        drift: curve.drift.iter().map(|&f| map.a * f).collect(),
        diff_sq: curve.diff_sq.iter().map(|&g| a_sq * g).collect(),
    })
}

/// Bisection width for zero-crossing refinement.
const CROSSING_TOL: f64 = 1e-6;

/// Locates sign changes of `f` bracketed by consecutive grid values,
/// refining each by bisection on the continuous function.
fn zero_crossings(
    grid: &[f64],
    values: &[f64],
    mut f: impl FnMut(f64) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut crossings = Vec::new();
    for j in 0..grid.len() {
        if values[j] == 0.0 {
            crossings.push(grid[j]);
            continue;
        }
        if j + 1 >= grid.len() || values[j + 1] == 0.0 {
            continue;
        }
        if values[j] * values[j + 1] < 0.0 {
            let (mut lo, mut hi) = (grid[j], grid[j + 1]);
            let mut v_lo = values[j];
            while hi - lo > CROSSING_TOL {
                let mid = 0.5 * (lo + hi);
                let v_mid = f(mid)?;
                if v_mid == 0.0 {
                    lo = mid;
                    hi = mid;
                    break;
                }
                if v_lo * v_mid < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    v_lo = v_mid;
                }
            }
            crossings.push(0.5 * (lo + hi));
        }
    }
    Ok(crossings)
}

/// Evaluates a learned latent sequence against the true one.
///
/// Builds the estimator context from the learned latents, aligns, queries
/// the fields on the truth-unit grid (through the gauge preimage), and
/// compares against the analytic fields of `system` (which must be 1D).
pub fn evaluate_latents(
    learned: &[f64],
    truth: &[f64],
    dt: f64,
    system: &SdeSystem,
    kind: &EstimatorKind,
    cfg: &EvalConfig,
) -> Result<LatentMetrics> {
    cfg.validate()?;
    if system.dim() != 1 {
        return Err(Error::Config(format!(
            "evaluation supports 1D systems, got dimension {}",
            system.dim()
        )));
    }
    if learned.len() != truth.len() || learned.len() < 3 {
        return Err(Error::Config(format!(
            "evaluation needs equal-length latent sequences of at least 3 points, got {} and {}",
            learned.len(),
            truth.len()
        )));
    }
    let map = align_latent(learned, truth)?;
    let aligned: Vec<f64> = learned.iter().map(|&l| map.apply(l)).collect();
    let corr = pearson_corr(&aligned, truth)?;

    let states = ArrayView2::from_shape((learned.len(), 1), learned)
        .expect("contiguous latent column");
    let ctx = build_context(states, dt, cfg.max_context_pairs, cfg.context_seed)?;

    let grid = cfg.grid.values();
    let queries = Array2::from_shape_vec(
        (grid.len(), 1),
        grid.iter().map(|&u| map.preimage(u)).collect(),
    )
    .expect("query column");
    let fields = kind.estimate(&ctx, queries.view(), false)?;

    let a_sq = map.a * map.a;
    let estimated = FieldCurve {
        grid: grid.clone(),
        drift: (0..grid.len()).map(|j| map.a * fields.drift[[j, 0]]).collect(),
        diff_sq: (0..grid.len()).map(|j| a_sq * fields.diff_sq[[j, 0]]).collect(),
    };
    estimated.validate()?;

    let rmse = |est: &[f64], truth_at: &dyn Fn(f64) -> f64| -> f64 {
        let sum: f64 = grid
            .iter()
            .zip(est)
            .map(|(&u, &e)| {
                let t = truth_at(u);
                (e - t) * (e - t)
            })
            .sum();
        (sum / grid.len() as f64).sqrt()
    };
    let drift_rmse = rmse(&estimated.drift, &|u| system.drift_at(&[u])[0]);
    let diff_rmse = rmse(&estimated.diff_sq, &|u| system.diffusion_sq_at(&[u])[0]);

    let drift_zero_crossings = zero_crossings(&grid, &estimated.drift, |u| {
        let q = Array2::from_shape_vec((1, 1), vec![map.preimage(u)]).unwrap();
        Ok(map.a * kind.estimate(&ctx, q.view(), false)?.drift[[0, 0]])
    })?;

    Ok(LatentMetrics { alignment: map, corr, drift_rmse, diff_rmse, drift_zero_crossings, estimated })
}

/// Mean squared reconstruction error per pixel of `decode(encode(y))` over
/// all frames, computed in bounded-memory chunks.
pub fn reconstruction_mse(params: &AutoencoderParams, dataset: &VideoDataset) -> Result<f64> {
    let frames = dataset.frames();
    let mut total = 0.0;
    for chunk in frames.axis_chunks_iter(Axis(0), 512) {
        let latents = params.encode_batch(chunk);
        let recon = params.decode_batch(latents.view());
        let diff = &recon - &chunk;
        let part: f64 = diff.iter().map(|v| v * v).sum();
        if !part.is_finite() {
            return Err(Error::Numeric("non-finite reconstruction".into()));
        }
        total += part;
    }
    Ok(total / (frames.nrows() * frames.ncols()) as f64)
}

/// Full per-seed evaluation of a trained autoencoder on its dataset.
///
/// The dataset must retain its source latent trajectory (evaluation-only
/// information; training never sees it).
pub fn evaluate_run(
    params: &AutoencoderParams,
    dataset: &VideoDataset,
    system: &SdeSystem,
    kind: &EstimatorKind,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<RunReport> {
    let truth_traj = dataset.source_latent().ok_or_else(|| {
        Error::Config("dataset carries no source latent; cannot evaluate".into())
    })?;
    if truth_traj.dim() != 1 || params.latent_dim() != 1 {
        return Err(Error::Config("evaluation requires 1D truth and 1D learned latents".into()));
    }
    if truth_traj.len() != dataset.n_frames() {
        return Err(Error::Config("source latent length does not match frame count".into()));
    }
    let learned_col = params.encode_batch(dataset.frames());
    let learned: Vec<f64> = learned_col.column(0).to_vec();
    let truth: Vec<f64> = truth_traj.component(0);
    let metrics = evaluate_latents(&learned, &truth, dataset.dt(), system, kind, cfg)?;
    let recon = reconstruction_mse(params, dataset)?;
    Ok(RunReport {
        seed,
        alignment: metrics.alignment,
        corr: metrics.corr,
        drift_rmse: metrics.drift_rmse,
        diff_rmse: metrics.diff_rmse,
        drift_zero_crossings: metrics.drift_zero_crossings,
        recon_mse_per_pixel: recon,
        estimated: metrics.estimated,
        trace_ref: None,
        config_hash: None,
    })
}

/// Per-seed metric row in the aggregate table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub corr: f64,
    pub drift_rmse: f64,
    pub diff_rmse: f64,
    pub recon_mse_per_pixel: f64,
    pub n_zero_crossings: usize,
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Multi-seed aggregate: mean curves with percentile bands plus the metric
/// table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub n_runs: usize,
    pub grid: Vec<f64>,
    pub drift_mean: Vec<f64>,
    pub drift_lo: Vec<f64>,
    pub drift_hi: Vec<f64>,
    pub diff_sq_mean: Vec<f64>,
    pub diff_sq_lo: Vec<f64>,
    pub diff_sq_hi: Vec<f64>,
    pub per_seed: Vec<MetricRow>,
    pub summary: Vec<MetricStat>,
    /// Shared config hash of the aggregated runs, when they declare one.
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Nearest-rank percentile of already-sorted values.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() < 2 {
        0.0
    } else {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var.sqrt())
}

/// Aggregates at least two run reports sharing one evaluation grid.
pub fn aggregate_runs(reports: &[RunReport]) -> Result<AggregateSummary> {
    if reports.len() < 2 {
        return Err(Error::Config(format!("need >= 2 reports to aggregate, got {}", reports.len())));
    }
    let grid = &reports[0].estimated.grid;
    let mut config_hash: Option<String> = None;
    for r in reports {
        if &r.estimated.grid != grid {
            return Err(Error::Config(format!(
                "mismatched evaluation grids: seed {} disagrees with seed {}",
                r.seed, reports[0].seed
            )));
        }
        r.estimated.validate()?;
        match (&config_hash, &r.config_hash) {
            (None, Some(h)) => config_hash = Some(h.clone()),
            (Some(seen), Some(h)) if seen != h => {
                return Err(Error::Config(format!(
                    "reports come from different configs: seed {} has hash {h}, another has {seen}",
                    r.seed
                )));
            }
            _ => {}
        }
    }
    let n_points = grid.len();
    let n = reports.len();
    let curve_stats = |pick: &dyn Fn(&RunReport) -> &[f64]| {
        let mut mean = Vec::with_capacity(n_points);
        let mut lo = Vec::with_capacity(n_points);
        let mut hi = Vec::with_capacity(n_points);
        for j in 0..n_points {
            let mut column: Vec<f64> = reports.iter().map(|r| pick(r)[j]).collect();
            mean.push(column.iter().sum::<f64>() / n as f64);
            column.sort_by(|a, b| a.partial_cmp(b).expect("finite curve values"));
            lo.push(percentile_sorted(&column, 5.0));
            hi.push(percentile_sorted(&column, 95.0));
        }
        (mean, lo, hi)
    };
    let (drift_mean, drift_lo, drift_hi) = curve_stats(&|r| &r.estimated.drift);
    let (diff_sq_mean, diff_sq_lo, diff_sq_hi) = curve_stats(&|r| &r.estimated.diff_sq);

    let per_seed: Vec<MetricRow> = reports
        .iter()
        .map(|r| MetricRow {
            seed: r.seed,
            corr: r.corr,
            drift_rmse: r.drift_rmse,
            diff_rmse: r.diff_rmse,
            recon_mse_per_pixel: r.recon_mse_per_pixel,
            n_zero_crossings: r.drift_zero_crossings.len(),
        })
        .collect();

    let metrics: [(&str, Box<dyn Fn(&RunReport) -> f64>); 4] = [
        ("corr", Box::new(|r: &RunReport| r.corr)),
        ("drift_rmse", Box::new(|r: &RunReport| r.drift_rmse)),
        ("diff_rmse", Box::new(|r: &RunReport| r.diff_rmse)),
        ("recon_mse_per_pixel", Box::new(|r: &RunReport| r.recon_mse_per_pixel)),
    ];
    let summary = metrics
        .iter()
        .map(|(name, pick)| {
            let values: Vec<f64> = reports.iter().map(|r| pick(r)).collect();
            let (mean, std) = mean_std(&values);
            MetricStat { name: (*name).to_string(), mean, std }
        })
        .collect();

    Ok(AggregateSummary {
        n_runs: n,
        grid: grid.clone(),
        drift_mean,
        drift_lo,
        drift_hi,
        diff_sq_mean,
        diff_sq_lo,
        diff_sq_hi,
        per_seed,
        summary,
        config_hash,
    })
}
