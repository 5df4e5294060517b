//! Dynamics-constrained autoencoder training.
//!
//! The loss pushes `decode(encode(y_i) + one latent Euler-Maruyama step)`
//! toward the next frame `y_{i+1}`, with the drift/diffusion fields supplied
//! by the frozen estimator conditioned on the current encoder outputs. Only
//! encoder and decoder parameters receive gradients; the context is always
//! treated as constant, and the estimator's dependence on the query point
//! enters the gradient only when `grad_through_estimator` is set (the
//! detached variant is required for remote estimators, which cannot return
//! jacobians).

use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::VideoDataset;
use crate::error::{Error, Result};
use crate::estimator::remote::estimate_remote;
use crate::estimator::{estimate, EstimatorContext, FieldEstimate};
use crate::nn::{
    adam_step, flatten_grads, init_params, mlp_backward, mlp_forward_checked, AdamHyper,
    AdamState, AutoencoderParams, MlpSpec,
};
use crate::rng::{sample_without_replacement, stream, stream_rng};

/// Where the frozen fields come from during loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Local,
    Remote { endpoint: String, timeout_ms: u64 },
}

impl EstimatorKind {
    pub fn is_remote(&self) -> bool {
        matches!(self, EstimatorKind::Remote { .. })
    }

    /// Queries this field source. Remote sources reject `with_grad`.
    pub fn estimate(
        &self,
        ctx: &EstimatorContext,
        queries: ArrayView2<'_, f64>,
        with_grad: bool,
    ) -> Result<FieldEstimate> {
        match self {
            EstimatorKind::Local => estimate(ctx, queries, with_grad),
            EstimatorKind::Remote { endpoint, timeout_ms } => {
                if with_grad {
                    return Err(Error::Config(
                        "remote estimators cannot provide query-jacobians; \
                         disable grad_through_estimator"
                            .into(),
                    ));
                }
                estimate_remote(endpoint, ctx, queries, Duration::from_millis(*timeout_ms))
            }
        }
    }
}

/// Training-protocol knobs. Architecture is the symmetric three-layer MLP
/// pair `D -> hidden.0 -> hidden.1 -> latent_dim` and its mirror.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Maximum context pairs M.
    pub context_size: usize,
    /// Rebuild the context every this many steps (1 = every step).
    pub context_refresh_every: usize,
    pub adam: AdamHyper,
    pub grad_through_estimator: bool,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden: (usize, usize),
    pub estimator: EstimatorKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 256,
            context_size: 1024,
            context_refresh_every: 1,
            adam: AdamHyper::default(),
            grad_through_estimator: true,
            seed: 0,
            latent_dim: 1,
            hidden: (128, 64),
            estimator: EstimatorKind::Local,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.context_size < 2 {
            return Err(Error::Config("context_size must be at least 2".into()));
        }
        if self.context_refresh_every < 1 {
            return Err(Error::Config("context_refresh_every must be at least 1".into()));
        }
        if self.latent_dim < 1 || self.hidden.0 < 1 || self.hidden.1 < 1 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, beta) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.estimator.is_remote() && self.grad_through_estimator {
            return Err(Error::Config(
                "remote estimators cannot provide query-jacobians; \
                 disable grad_through_estimator"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Encoder/decoder specs for a dataset with `obs_dim` pixels.
    pub fn model_specs(&self, obs_dim: usize) -> Result<(MlpSpec, MlpSpec)> {
        let enc = MlpSpec::three_layer(obs_dim, self.hidden.0, self.hidden.1, self.latent_dim)?;
        let dec = MlpSpec::three_layer(self.latent_dim, self.hidden.1, self.hidden.0, obs_dim)?;
        Ok((enc, dec))
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Loss summed over batch elements and pixels.
    pub loss: f64,
    /// Same loss averaged per batch element and pixel, for readability.
    pub loss_per_pixel: f64,
    /// Wall-clock spent on the step. Excluded from exported artifacts so
    /// that traces stay bit-reproducible.
    pub wall: Duration,
    /// Whether the context was rebuilt at the top of this step.
    pub refreshed: bool,
    /// Number of batch queries that hit the kernel underflow fallback.
    pub fallback_queries: usize,
}

/// Per-step loss history of one training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<StepRecord>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.loss)
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// One latent Euler-Maruyama step `x + dt*f + eps .* sqrt(dt*g)`.
pub fn latent_step(x: &[f64], f_hat: &[f64], g_hat: &[f64], dt: f64, eps: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if f_hat.len() != d || g_hat.len() != d || eps.len() != d {
        return Err(Error::Config(format!(
            "latent_step length mismatch: x {d}, f {}, g {}, eps {}",
            f_hat.len(),
            g_hat.len(),
            eps.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::Config("latent_step needs dt > 0".into()));
    }
    if g_hat.iter().any(|&g| g < 0.0) {
        return Err(Error::Config("latent_step needs g_hat >= 0".into()));
    }
    Ok((0..d).map(|k| x[k] + dt * f_hat[k] + eps[k] * (dt * g_hat[k]).sqrt()).collect())
}

/// Result of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossEval {
    /// Sum over batch elements and pixels.
    pub loss: f64,
    /// Gradient with respect to the flat parameter vector.
    pub grad: Vec<f64>,
    /// Batch queries that hit the kernel underflow fallback.
    pub fallback_queries: usize,
}

fn gather_rows(frames: ArrayView2<'_, f64>, indices: &[usize], offset: usize) -> Array2<f64> {
    let shifted: Vec<usize> = indices.iter().map(|&i| i + offset).collect();
    frames.select(Axis(0), &shifted)
}

fn check_batch(batch: &[usize], n_frames: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i + 1 >= n_frames) {
        return Err(Error::Config(format!(
            "batch index {bad} has no successor frame (N = {n_frames})"
        )));
    }
    Ok(())
}

/// Dynamics-constrained loss and its parameter gradient.
///
/// `eps` is one standard-normal row per batch element. The context is
/// constant; query-gradients of the fields enter iff
/// `grad_through_estimator`.
pub fn dynamics_loss(
    params: &AutoencoderParams,
    dataset: &VideoDataset,
    ctx: &EstimatorContext,
    source: &EstimatorKind,
    batch: &[usize],
    eps: ArrayView2<'_, f64>,
    grad_through_estimator: bool,
) -> Result<LossEval> {
    let d = params.latent_dim();
    check_batch(batch, dataset.n_frames())?;
    if eps.dim() != (batch.len(), d) {
        return Err(Error::Config(format!(
            "eps draws have shape {:?}, expected ({}, {d})",
            eps.dim(),
            batch.len()
        )));
    }
    if ctx.dim() != d {
        return Err(Error::Config(format!(
            "context dimension {} does not match latent dimension {d}",
            ctx.dim()
        )));
    }
    let dt = dataset.dt();
    let frames = dataset.frames();
    let y_now = gather_rows(frames, batch, 0);
    let y_next = gather_rows(frames, batch, 1);

    let enc_trace =
        mlp_forward_checked(&params.encoder, params.enc_spec().activation, y_now.view(), "encoder")?;
    let x = enc_trace.output().clone();

    let fields = source.estimate(ctx, x.view(), grad_through_estimator)?;
    let fallback_queries = fields.flags.len();

    // x_next = x + dt*f + eps .* sqrt(dt*g), elementwise over (B, d).
    let noise_scale = fields.diff_sq.mapv(|g| (dt * g).sqrt());
    let x_next = &x + &(dt * &fields.drift) + &(&eps.to_owned() * &noise_scale);

    let dec_trace = mlp_forward_checked(
        &params.decoder,
        params.dec_spec().activation,
        x_next.view(),
        "decoder",
    )?;
    let residual = dec_trace.output() - &y_next;
    let loss: f64 = residual.iter().map(|r| r * r).sum();
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }

    let (dec_grads, d_x_next) = mlp_backward(
        &params.decoder,
        params.dec_spec().activation,
        x_next.view(),
        &dec_trace,
        2.0 * residual,
    );

    // d loss / d x: identity path, plus the field jacobians when gradients
    // flow through the estimator's query dependence.
    let d_x = if grad_through_estimator {
        let f_jac = fields
            .drift_jac
            .as_ref()
            .ok_or_else(|| Error::Numeric("estimator returned no drift jacobian".into()))?;
        let g_jac = fields
            .diff_sq_jac
            .as_ref()
            .ok_or_else(|| Error::Numeric("estimator returned no diffusion jacobian".into()))?;
        let b_count = batch.len();
        let mut d_x = Array2::zeros((b_count, d));
        for bi in 0..b_count {
            for k in 0..d {
                let mut acc = d_x_next[[bi, k]];
                for a in 0..d {
                    let ds_dg = if noise_scale[[bi, a]] > 0.0 {
                        0.5 * dt / noise_scale[[bi, a]]
                    } else {
                        0.0
                    };
                    acc += d_x_next[[bi, a]]
                        * (dt * f_jac[[bi, a, k]] + eps[[bi, a]] * ds_dg * g_jac[[bi, a, k]]);
                }
                d_x[[bi, k]] = acc;
            }
        }
        d_x
    } else {
        d_x_next
    };

    let (enc_grads, _) = mlp_backward(
        &params.encoder,
        params.enc_spec().activation,
        y_now.view(),
        &enc_trace,
        d_x,
    );
    let grad = flatten_grads(&enc_grads, &dec_grads);
    Ok(LossEval { loss, grad, fallback_queries })
}

/// Same loss with the fields pinned to given constants, no estimator calls.
///
/// This is the finite-difference oracle for the detached gradient policy
/// (the analytic detached gradient must match differences of this function
/// with the fields frozen at their base-parameter values), and the natural
/// rig for degenerate-field tests.
pub fn dynamics_loss_frozen_fields(
    params: &AutoencoderParams,
    dataset: &VideoDataset,
    batch: &[usize],
    eps: ArrayView2<'_, f64>,
    drift: ArrayView2<'_, f64>,
    diff_sq: ArrayView2<'_, f64>,
) -> Result<f64> {
    let d = params.latent_dim();
    check_batch(batch, dataset.n_frames())?;
    let b_count = batch.len();
    if eps.dim() != (b_count, d) || drift.dim() != (b_count, d) || diff_sq.dim() != (b_count, d) {
        return Err(Error::Config("frozen-field shapes must all be (batch, d)".into()));
    }
    if diff_sq.iter().any(|&g| g < 0.0) {
        return Err(Error::Config("diff_sq must be nonnegative".into()));
    }
    let dt = dataset.dt();
    let frames = dataset.frames();
    let y_now = gather_rows(frames, batch, 0);
    let y_next = gather_rows(frames, batch, 1);
    let enc_trace =
        mlp_forward_checked(&params.encoder, params.enc_spec().activation, y_now.view(), "encoder")?;
    let x = enc_trace.output();
    let noise_scale = diff_sq.mapv(|g| (dt * g).sqrt());
    let x_next = x + &(dt * &drift.to_owned()) + &(&eps.to_owned() * &noise_scale);
    let dec_trace = mlp_forward_checked(
        &params.decoder,
        params.dec_spec().activation,
        x_next.view(),
        "decoder",
    )?;
    let residual = dec_trace.output() - &y_next;
    let loss = residual.iter().map(|r| r * r).sum();
    if !f64::is_finite(loss) {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(loss)
}

/// Trains the encoder-decoder pair with the estimator frozen.
///
/// Identical config + dataset give a bit-identical result. `steps = 0`
/// returns the freshly initialized parameters and an empty trace.
pub fn train(dataset: &VideoDataset, cfg: &TrainConfig) -> Result<(AutoencoderParams, LossTrace)> {
    train_with_observer(dataset, cfg, |_, _, _| Ok(()))
}

/// [`train`] with a per-step callback (step index, parameters after the
/// Adam update, trace so far); used for periodic checkpointing.
pub fn train_with_observer(
    dataset: &VideoDataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &AutoencoderParams, &LossTrace) -> Result<()>,
) -> Result<(AutoencoderParams, LossTrace)> {
    cfg.validate()?;
    let n_frames = dataset.n_frames();
    if n_frames < 3 {
        return Err(Error::Config(format!("training needs at least 3 frames, got {n_frames}")));
    }
    let (enc_spec, dec_spec) = cfg.model_specs(dataset.dim())?;
    let mut params = init_params(&enc_spec, &dec_spec, cfg.seed)?;
    let mut trace = LossTrace::default();
    if cfg.steps == 0 {
        return Ok((params, trace));
    }

    let mut adam = AdamState::new(params.n_params(), cfg.adam);
    let mut ctx_rng = stream_rng(cfg.seed, stream::CONTEXT);
    let mut batch_rng = stream_rng(cfg.seed, stream::BATCH);
    let mut eps_rng = stream_rng(cfg.seed, stream::EPS);
    let frames = dataset.frames();
    let n_pairs = n_frames - 1;
    let pixels = (cfg.batch_size * dataset.dim()) as f64;

    let mut ctx: Option<EstimatorContext> = None;
    for step in 0..cfg.steps {
        let started = Instant::now();
        let refreshed = step % cfg.context_refresh_every == 0 || ctx.is_none();
        if refreshed {
            let indices = if n_pairs > cfg.context_size {
                sample_without_replacement(n_pairs, cfg.context_size, &mut ctx_rng)
            } else {
                (0..n_pairs).collect()
            };
            let x = params.encode_batch(gather_rows(frames, &indices, 0).view());
            let x_next = params.encode_batch(gather_rows(frames, &indices, 1).view());
            ctx = Some(EstimatorContext::from_pairs(x, x_next.view(), dataset.dt()).map_err(
                |e| match e {
                    Error::Collapse(msg) => {
                        Error::Collapse(format!("training step {step}: {msg}"))
                    }
                    other => other,
                },
            )?);
        }
        let context = ctx.as_ref().expect("context built on first step");

        let batch: Vec<usize> =
            (0..cfg.batch_size).map(|_| batch_rng.random_range(0..n_pairs)).collect();
        let eps = Array2::from_shape_fn((cfg.batch_size, cfg.latent_dim), |_| {
            eps_rng.sample::<f64, _>(StandardNormal)
        });

        let eval = dynamics_loss(
            &params,
            dataset,
            context,
            &cfg.estimator,
            &batch,
            eps.view(),
            cfg.grad_through_estimator,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("training step {step}: {msg}")),
            other => other,
        })?;
        adam_step(&mut params, &eval.grad, &mut adam)?;

        trace.records.push(StepRecord {
            step,
            loss: eval.loss,
            loss_per_pixel: eval.loss / pixels,
            wall: started.elapsed(),
            refreshed,
            fallback_queries: eval.fallback_queries,
        });
        observer(step, &params, &trace)?;
    }
    Ok((params, trace))
}
