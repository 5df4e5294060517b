//! Frozen drift/diffusion estimator conditioned on a context of latent
//! transitions.
//!
//! This is the stand-in for a pretrained zero-shot inference network: it has
//! no trainable state, consumes a context `D` of transition pairs, and
//! returns drift and squared-diffusion estimates at arbitrary query points,
//! together with exact analytic derivatives with respect to the query. The
//! realization is Nadaraya-Watson kernel regression of the Kramers-Moyal
//! conditional moments in standardized coordinates:
//!
//! * weights `w_i(z) ∝ exp(-|z - z_i|^2 / (2 h^2))`, normalized per query;
//! * drift `f(x) = sum_i w_i * dx_i / dt`;
//! * squared diffusion `g(x) = sum_i w_i * (dx_i - dt * f(x))^2 / dt`
//!   (drift-corrected increments), floored at [`DIFFUSION_FLOOR`].
//!
//! Standardization makes the weights invariant under affine maps of the
//! context, which gives the estimator the exact gauge equivariance
//! (`f -> a f`, `g -> a^2 g`) that evaluation relies on. The query gradient
//! of the weights is `dw_i/dz_b = w_i (beta_ib - sum_j w_j beta_jb)` with
//! `beta_ib = -(z_b - z_ib) / h_b^2`; the drift-corrected second moment has
//! zero extra gradient term because the weights sum to one, so both field
//! jacobians reduce to weighted moment expressions evaluated in one pass.
//!
//! [`remote`] speaks the same interface over HTTP for plugging in an
//! external estimator.

pub mod remote;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::rng::{sample_without_replacement, stream, stream_rng};

/// Lower bound applied to every squared-diffusion estimate. The square root
/// of the estimate enters the training loss, so its derivative must stay
/// bounded near zero.
pub const DIFFUSION_FLOOR: f64 = 1e-6;

/// Lower bound on the kernel bandwidth in standardized units; guards
/// against spiky weights on near-degenerate contexts.
pub const BANDWIDTH_FLOOR: f64 = 0.05;

/// Threshold below which a context dimension counts as collapsed.
const COLLAPSE_STD: f64 = 1e-12;

/// The frozen-estimator context: transition pairs plus standardization
/// statistics of the pair start points.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorContext {
    /// Pair start points, (M, d).
    pairs_x: Array2<f64>,
    /// Increments `x_next - x`, (M, d).
    delta_x: Array2<f64>,
    /// Standardized start points, cached for queries.
    z: Array2<f64>,
    dt: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
    bandwidth: Vec<f64>,
}

impl EstimatorContext {
    /// Builds a context from explicit transition pairs.
    pub fn from_pairs(pairs_x: Array2<f64>, x_next: ArrayView2<'_, f64>, dt: f64) -> Result<Self> {
        let m = pairs_x.nrows();
        let d = pairs_x.ncols();
        if m < 2 {
            return Err(Error::Config(format!("context needs at least 2 pairs, got {m}")));
        }
        if x_next.dim() != (m, d) {
            return Err(Error::Config("context pair arrays must have equal shapes".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("context dt must be positive".into()));
        }
        if pairs_x.iter().chain(x_next.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in context pairs".into()));
        }

        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for k in 0..d {
            let col = pairs_x.column(k);
            let mut sum = 0.0;
            for v in col.iter() {
                sum += v;
            }
            let mu = sum / m as f64;
            let mut ss = 0.0;
            for v in col.iter() {
                let c = v - mu;
                ss += c * c;
            }
            let sigma = (ss / m as f64).sqrt();
            if sigma < COLLAPSE_STD {
                return Err(Error::Collapse(format!(
                    "collapsed context: standard deviation {sigma:e} in dimension {k}"
                )));
            }
            mean[k] = mu;
            std[k] = sigma;
        }

        // Silverman's rule in standardized units, where the sample standard
        // deviation is 1 by construction.
        let h = (1.06 * (m as f64).powf(-0.2)).max(BANDWIDTH_FLOOR);
        let bandwidth = vec![h; d];

        let mut z = pairs_x.clone();
        for k in 0..d {
            let (mu, sigma) = (mean[k], std[k]);
            z.column_mut(k).mapv_inplace(|v| (v - mu) / sigma);
        }
        let delta_x = &x_next - &pairs_x;

        Ok(EstimatorContext { pairs_x, delta_x, z, dt, mean, std, bandwidth })
    }

    pub fn len(&self) -> usize {
        self.pairs_x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs_x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.pairs_x.ncols()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn pairs_x(&self) -> ArrayView2<'_, f64> {
        self.pairs_x.view()
    }

    pub fn delta_x(&self) -> ArrayView2<'_, f64> {
        self.delta_x.view()
    }
}

/// Forms consecutive pairs from a state sequence; if there are more than
/// `max_pairs`, subsamples that many uniformly without replacement (seeded,
/// kept in temporal order).
pub fn build_context(
    states: ArrayView2<'_, f64>,
    dt: f64,
    max_pairs: usize,
    seed: u64,
) -> Result<EstimatorContext> {
    let n = states.nrows();
    if n < 3 {
        return Err(Error::Config(format!("need at least 3 states to build a context, got {n}")));
    }
    if max_pairs < 2 {
        return Err(Error::Config("max_pairs must be at least 2".into()));
    }
    let n_pairs = n - 1;
    let take: Vec<usize> = if n_pairs > max_pairs {
        let mut rng = stream_rng(seed, stream::SUBSAMPLE);
        sample_without_replacement(n_pairs, max_pairs, &mut rng)
    } else {
        (0..n_pairs).collect()
    };
    let d = states.ncols();
    let mut x = Array2::zeros((take.len(), d));
    let mut x_next = Array2::zeros((take.len(), d));
    for (row, &i) in take.iter().enumerate() {
        x.row_mut(row).assign(&states.row(i));
        x_next.row_mut(row).assign(&states.row(i + 1));
    }
    EstimatorContext::from_pairs(x, x_next.view(), dt)
}

/// Drift and squared-diffusion estimates at a batch of query points.
#[derive(Clone, Debug)]
pub struct FieldEstimate {
    /// (Q, d) drift estimates, original units per time.
    pub drift: Array2<f64>,
    /// (Q, d) squared-diffusion estimates, floored at [`DIFFUSION_FLOOR`].
    pub diff_sq: Array2<f64>,
    /// (Q, d, d) jacobian `d drift_a / d x_b`, if requested.
    pub drift_jac: Option<Array3<f64>>,
    /// (Q, d, d) jacobian `d diff_sq_a / d x_b`, if requested.
    pub diff_sq_jac: Option<Array3<f64>>,
    /// Indices of queries that fell back to the nearest pair because every
    /// kernel weight underflowed (out-of-support queries).
    pub flags: Vec<usize>,
}

/// Evaluates the kernel estimator at `queries` (rows, original units).
///
/// With `with_grad`, exact analytic query-jacobians are included; fallback
/// queries get zero jacobians (the fallback is piecewise constant).
pub fn estimate(
    ctx: &EstimatorContext,
    queries: ArrayView2<'_, f64>,
    with_grad: bool,
) -> Result<FieldEstimate> {
    let d = ctx.dim();
    if queries.ncols() != d {
        return Err(Error::Config(format!(
            "queries have dimension {}, context has {}",
            queries.ncols(),
            d
        )));
    }
    if queries.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite query point".into()));
    }
    let m = ctx.len();
    let q_count = queries.nrows();
    let dt = ctx.dt();

    let mut drift = Array2::zeros((q_count, d));
    let mut diff_sq = Array2::zeros((q_count, d));
    let mut drift_jac = with_grad.then(|| Array3::zeros((q_count, d, d)));
    let mut diff_sq_jac = with_grad.then(|| Array3::zeros((q_count, d, d)));
    let mut flags = Vec::new();

    let mut weights = vec![0.0f64; m];
    let mut zq = vec![0.0f64; d];

    for qi in 0..q_count {
        for k in 0..d {
            zq[k] = (queries[[qi, k]] - ctx.mean[k]) / ctx.std[k];
        }

        // Kernel weights; track the nearest pair for the underflow fallback.
        let mut total = 0.0f64;
        let mut best_idx = 0usize;
        let mut best_arg = f64::NEG_INFINITY;
        for i in 0..m {
            let mut arg = 0.0;
            for k in 0..d {
                let diff = zq[k] - ctx.z[[i, k]];
                let h = ctx.bandwidth[k];
                arg -= diff * diff / (2.0 * h * h);
            }
            if arg > best_arg {
                best_arg = arg;
                best_idx = i;
            }
            let u = arg.exp();
            weights[i] = u;
            total += u;
        }
        let fallback = total == 0.0;
        if fallback {
            flags.push(qi);
            weights.iter_mut().for_each(|w| *w = 0.0);
            weights[best_idx] = 1.0;
        } else {
            let inv = 1.0 / total;
            weights.iter_mut().for_each(|w| *w *= inv);
        }

        // Weighted first and drift-corrected second moments.
        for a in 0..d {
            let mut first = 0.0;
            for i in 0..m {
                first += weights[i] * ctx.delta_x[[i, a]];
            }
            let f = first / dt;
            drift[[qi, a]] = f;
            let shift = dt * f;
            let mut second = 0.0;
            for i in 0..m {
                let r = ctx.delta_x[[i, a]] - shift;
                second += weights[i] * r * r;
            }
            let g_raw = second / dt;
            diff_sq[[qi, a]] = g_raw.max(DIFFUSION_FLOOR);

            if with_grad && !fallback {
                let f_jac = drift_jac.as_mut().unwrap();
                let g_jac = diff_sq_jac.as_mut().unwrap();
                for b in 0..d {
                    let h = ctx.bandwidth[b];
                    let inv_h_sq = 1.0 / (h * h);
                    // beta_ib = -(zq_b - z_ib) / h_b^2.
                    let mut beta_bar = 0.0;
                    for i in 0..m {
                        beta_bar += weights[i] * (-(zq[b] - ctx.z[[i, b]]) * inv_h_sq);
                    }
                    let mut mom_f = 0.0;
                    let mut mom_g = 0.0;
                    for i in 0..m {
                        let beta = -(zq[b] - ctx.z[[i, b]]) * inv_h_sq;
                        let w_beta = weights[i] * (beta - beta_bar);
                        mom_f += w_beta * ctx.delta_x[[i, a]];
                        let r = ctx.delta_x[[i, a]] - shift;
                        mom_g += w_beta * r * r;
                    }
                    // Chain rule through z = (x - mean) / std.
                    f_jac[[qi, a, b]] = mom_f / dt / ctx.std[b];
                    // The clamp is locally constant below the floor.
                    g_jac[[qi, a, b]] = if g_raw > DIFFUSION_FLOOR {
                        mom_g / dt / ctx.std[b]
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    Ok(FieldEstimate { drift, diff_sq, drift_jac, diff_sq_jac, flags })
}
