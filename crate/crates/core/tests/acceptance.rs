//! Acceptance gate for the full pipeline.
//!
//! Seven criteria, one test and one printed PASS/FAIL line each:
//!
//! 1. analytic loss gradients match central finite differences elementwise,
//! 2. the simulator reproduces the double-well equilibrium structure,
//! 3. the kernel estimator recovers both fields from true latents,
//! 4. end-to-end discovery succeeds on at least 9 of 10 training seeds,
//! 5. the evaluation is invariant under negating the learned latents,
//! 6. repeating a seed bit-reproduces its trace and report,
//! 7. artifacts round-trip byte-exactly and the remote handshake passes.
//!
//! Criteria 4-7 share one pipeline execution (the dominant cost); run with
//! `--nocapture` to see the PASS lines as they come.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};

use latent_sde::artifact::{self, CheckpointMeta};
use latent_sde::config::PipelineConfig;
use latent_sde::embedding::{embed_trajectory, BlobConfig, VideoDataset};
use latent_sde::estimator::{estimate, remote, EstimatorContext};
use latent_sde::eval::{evaluate_latents, evaluate_run, RunReport};
use latent_sde::nn::init_params;
use latent_sde::sde::{double_well_system, euler_maruyama, SimConfig};
use latent_sde::training::{
    dynamics_loss, dynamics_loss_frozen_fields, train, EstimatorKind, LossTrace, TrainConfig,
};

/// Training steps for the discovery criterion. The allowed window is
/// 300..=1000; 500 gives every shipped seed a comfortable margin while most
/// runs at 300 sit at the edge of the crossing tolerance.
const DISCOVERY_TRAIN_STEPS: usize = 500;

type Outcome = Result<String, String>;

fn err_str(e: latent_sde::Error) -> String {
    e.to_string()
}

fn verdict(number: u8, name: &str, outcome: Outcome) {
    match outcome {
        Ok(note) if note.is_empty() => println!("criterion {number} ({name}): PASS"),
        Ok(note) => println!("criterion {number} ({name}): PASS ({note})"),
        Err(why) => {
            println!("criterion {number} ({name}): FAIL ({why})");
            panic!("criterion {number} ({name}) failed: {why}");
        }
    }
}

fn within(start: Instant, limit_s: f64) -> Result<f64, String> {
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= limit_s {
        return Err(format!("took {elapsed:.1} s, limit {limit_s} s"));
    }
    Ok(elapsed)
}

#[test]
fn criterion_1_gradient_exactness() {
    verdict(1, "gradient exactness", (|| {
        let start = Instant::now();

        // Tiny instance: 32 frames of 4x4 pixels, 8/4 hidden units, 1D
        // latent, fixed noise draws and a fixed estimator context.
        let sim = SimConfig { dt: 0.02, n_steps: 32, x0: vec![0.0], seed: 5 };
        let system = double_well_system();
        let traj = euler_maruyama(&system, &sim).map_err(err_str)?;
        let blob = BlobConfig {
            grid_h: 4,
            grid_w: 4,
            sigma_px: 0.8,
            scale_px: 1.2,
            center_row: 1.5,
            center_col: 1.5,
            amplitude: 1.0,
        };
        let dataset = embed_trajectory(&traj, &blob).map_err(err_str)?;
        let obs_dim = blob.pixel_count();

        let train_cfg = TrainConfig { latent_dim: 1, hidden: (8, 4), ..TrainConfig::default() };
        let (enc, dec) = train_cfg.model_specs(obs_dim).map_err(err_str)?;
        let params = init_params(&enc, &dec, 11).map_err(err_str)?;

        let states = traj.as_array().to_owned();
        let pairs_x = states.slice(ndarray::s![..-1, ..]).to_owned();
        let x_next = states.slice(ndarray::s![1.., ..]);
        let ctx = EstimatorContext::from_pairs(pairs_x, x_next, sim.dt).map_err(err_str)?;

        let batch: Vec<usize> = (0..dataset.n_frames() - 1).collect();
        let eps = Array2::from_shape_fn((batch.len(), 1), |(i, _)| {
            1.5 * ((i as f64) * 0.83).sin()
        });

        let flat = params.flatten();
        let h = 3e-5;
        for through in [false, true] {
            let eval = dynamics_loss(
                &params,
                &dataset,
                &ctx,
                &EstimatorKind::Local,
                &batch,
                eps.view(),
                through,
            )
            .map_err(err_str)?;

            // The detached gradient differentiates the loss with the fields
            // frozen at the base parameters; the through gradient
            // differentiates the full loss. Each gets the matching FD oracle.
            let frozen = if through {
                None
            } else {
                let queries =
                    params.encode_batch(dataset.frames().select(Axis(0), &batch).view());
                Some(estimate(&ctx, queries.view(), false).map_err(err_str)?)
            };

            let mut worst = (0.0f64, 0usize);
            for i in 0..flat.len() {
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let fd_loss = |v: &[f64]| -> Result<f64, String> {
                    let p = latent_sde::nn::AutoencoderParams::from_flat(&enc, &dec, v)
                        .map_err(err_str)?;
                    match &frozen {
                        Some(fields) => dynamics_loss_frozen_fields(
                            &p,
                            &dataset,
                            &batch,
                            eps.view(),
                            fields.drift.view(),
                            fields.diff_sq.view(),
                        )
                        .map_err(err_str),
                        None => dynamics_loss(
                            &p,
                            &dataset,
                            &ctx,
                            &EstimatorKind::Local,
                            &batch,
                            eps.view(),
                            true,
                        )
                        .map(|e| e.loss)
                        .map_err(err_str),
                    }
                };
                let fd = (fd_loss(&plus)? - fd_loss(&minus)?) / (2.0 * h);
                let g = eval.grad[i];
                if g.abs() > 1e-8 {
                    let rel = (fd - g).abs() / g.abs().max(fd.abs());
                    if rel > worst.0 {
                        worst = (rel, i);
                    }
                }
            }
            if worst.0 >= 1e-5 {
                return Err(format!(
                    "grad_through_estimator={through}: relative error {:.2e} at parameter {}",
                    worst.0, worst.1
                ));
            }
        }

        let elapsed = within(start, 10.0)?;
        Ok(format!("{} parameters, both settings, {elapsed:.1} s", flat.len()))
    })());
}

#[test]
fn criterion_2_simulator_physics() {
    verdict(2, "simulator physics", (|| {
        let start = Instant::now();
        let sim = SimConfig { dt: 0.002, n_steps: 100_000, x0: vec![0.0], seed: 0 };
        let traj = euler_maruyama(&double_well_system(), &sim).map_err(err_str)?;
        let xs = traj.component(0);

        let sup = xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if sup >= 2.0 {
            return Err(format!("sup|x| = {sup:.3}, limit 2.0"));
        }

        // Histogram over [-2, 2] in 0.2-wide bins (narrower bins admit
        // sampling noise as spurious modes); a mode is a bin strictly above
        // both neighbors.
        let nbins = 20usize;
        let mut counts = vec![0usize; nbins];
        for &x in &xs {
            let bin = (((x + 2.0) / 0.2) as usize).min(nbins - 1);
            counts[bin] += 1;
        }
        let mut modes = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            let above_left = i == 0 || c > counts[i - 1];
            let above_right = i + 1 == nbins || c > counts[i + 1];
            if above_left && above_right {
                modes.push(-2.0 + 0.2 * (i as f64 + 0.5));
            }
        }
        if modes.len() != 2 {
            return Err(format!("expected exactly two modes, found {modes:?}"));
        }
        for (mode, target) in modes.iter().zip([-1.0, 1.0]) {
            if (mode - target).abs() > 0.15 {
                return Err(format!("mode at {mode:.2} is over 0.15 from {target}"));
            }
        }

        let elapsed = within(start, 5.0)?;
        Ok(format!(
            "modes at {:.2} and {:.2}, sup|x| = {sup:.2}, {elapsed:.1} s",
            modes[0], modes[1]
        ))
    })());
}

#[test]
fn criterion_3_estimator_fidelity_on_truth() {
    verdict(3, "estimator fidelity on truth", (|| {
        let start = Instant::now();
        let sim = SimConfig { dt: 0.002, n_steps: 200_000, x0: vec![0.0], seed: 0 };
        let system = double_well_system();
        let traj = euler_maruyama(&system, &sim).map_err(err_str)?;
        let truth = traj.component(0);

        // Feeding the truth as the learned series scores the estimator
        // itself: the alignment is exactly the identity.
        let cfg = PipelineConfig::default();
        let metrics = evaluate_latents(
            &truth,
            &truth,
            sim.dt,
            &system,
            &EstimatorKind::Local,
            &cfg.eval,
        )
        .map_err(err_str)?;

        if metrics.drift_rmse > 0.75 {
            return Err(format!("drift RMSE {:.3} > 0.75", metrics.drift_rmse));
        }
        if metrics.diff_rmse > 0.75 {
            return Err(format!("squared-diffusion RMSE {:.3} > 0.75", metrics.diff_rmse));
        }

        let mut crossings = metrics.drift_zero_crossings.clone();
        crossings.sort_by(f64::total_cmp);
        if crossings.len() != 3 {
            return Err(format!("{} drift zero crossings, expected 3", crossings.len()));
        }
        for (x, target) in crossings.iter().zip([-1.0, 0.0, 1.0]) {
            if (x - target).abs() > 0.25 {
                return Err(format!("crossing {x:.3} is over 0.25 from {target}"));
            }
        }

        let curve = &metrics.estimated;
        let argmax = curve
            .grid
            .iter()
            .zip(&curve.diff_sq)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(u, _)| *u)
            .ok_or("empty estimated curve")?;
        if argmax.abs() > 0.3 {
            return Err(format!("squared diffusion peaks at {argmax:.2}, outside |x| <= 0.3"));
        }

        let elapsed = within(start, 60.0)?;
        Ok(format!(
            "drift RMSE {:.2}, diffusion RMSE {:.2}, peak at {argmax:.2}, {elapsed:.1} s",
            metrics.drift_rmse, metrics.diff_rmse
        ))
    })());
}

/// One trained seed of the shared discovery pipeline.
struct SeedRun {
    seed: u64,
    trace: LossTrace,
    report: RunReport,
    params: latent_sde::nn::AutoencoderParams,
}

/// The shipped-config pipeline execution shared by criteria 4-7.
struct Discovery {
    cfg: PipelineConfig,
    dataset: VideoDataset,
    runs: Vec<SeedRun>,
    wall: Duration,
}

static DISCOVERY: OnceLock<Result<Discovery, String>> = OnceLock::new();

fn discovery() -> Result<&'static Discovery, String> {
    DISCOVERY
        .get_or_init(|| {
            let start = Instant::now();
            let mut cfg = PipelineConfig::default();
            cfg.train.steps = DISCOVERY_TRAIN_STEPS;
            cfg.validate().map_err(err_str)?;

            let system = double_well_system();
            let traj = euler_maruyama(&system, &cfg.sim).map_err(err_str)?;
            let dataset = embed_trajectory(&traj, &cfg.blob).map_err(err_str)?;

            let mut runs = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let (params, trace) =
                    train(&dataset, &cfg.train_for_seed(seed)).map_err(err_str)?;
                let report = evaluate_run(
                    &params,
                    &dataset,
                    &system,
                    &cfg.train.estimator,
                    &cfg.eval,
                    seed,
                )
                .map_err(err_str)?;
                runs.push(SeedRun { seed, trace, report, params });
            }
            Ok(Discovery { cfg, dataset, runs, wall: start.elapsed() })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn seed_passes(run: &SeedRun) -> Result<(), String> {
    let report = &run.report;
    if report.corr.abs() < 0.9 {
        return Err(format!("|corr| = {:.3} < 0.9", report.corr.abs()));
    }
    let first = run.trace.first_loss().ok_or("empty loss trace")?;
    let last = run.trace.final_loss().ok_or("empty loss trace")?;
    if last > 0.2 * first {
        return Err(format!("final/initial loss = {:.3} > 0.2", last / first));
    }
    let mut crossings = report.drift_zero_crossings.clone();
    crossings.sort_by(f64::total_cmp);
    if crossings.len() != 3 {
        return Err(format!("{} drift zero crossings, expected 3", crossings.len()));
    }
    for (x, target) in crossings.iter().zip([-1.0, 0.0, 1.0]) {
        if (x - target).abs() > 0.3 {
            return Err(format!("crossing {x:.3} is over 0.3 from {target}"));
        }
    }
    if report.recon_mse_per_pixel > 1e-3 {
        return Err(format!(
            "reconstruction MSE {:.2e} > 1e-3",
            report.recon_mse_per_pixel
        ));
    }
    Ok(())
}

#[test]
fn criterion_4_end_to_end_discovery() {
    verdict(4, "end-to-end discovery", (|| {
        let d = discovery()?;
        let failures: Vec<String> = d
            .runs
            .iter()
            .filter_map(|run| seed_passes(run).err().map(|why| format!("seed {}: {why}", run.seed)))
            .collect();
        let passed = d.runs.len() - failures.len();
        if passed + 1 < d.runs.len() {
            return Err(format!("{passed}/{} seeds passed: {}", d.runs.len(), failures.join("; ")));
        }
        let mut note = format!(
            "{passed}/{} seeds, {:.0} s pipeline wall (30 min target, not asserted)",
            d.runs.len(),
            d.wall.as_secs_f64()
        );
        if !failures.is_empty() {
            note.push_str(&format!("; tolerated {}", failures.join("; ")));
        }
        Ok(note)
    })());
}

#[test]
fn criterion_5_gauge_invariance() {
    verdict(5, "gauge invariance", (|| {
        let d = discovery()?;
        let system = double_well_system();
        let truth = d
            .dataset
            .source_latent()
            .ok_or("dataset lost its source latent")?
            .component(0);
        for run in &d.runs {
            let learned: Vec<f64> =
                run.params.encode_batch(d.dataset.frames()).column(0).to_vec();
            let negated: Vec<f64> = learned.iter().map(|v| -v).collect();
            let base = evaluate_latents(
                &learned,
                &truth,
                d.dataset.dt(),
                &system,
                &d.cfg.train.estimator,
                &d.cfg.eval,
            )
            .map_err(err_str)?;
            let flipped = evaluate_latents(
                &negated,
                &truth,
                d.dataset.dt(),
                &system,
                &d.cfg.train.estimator,
                &d.cfg.eval,
            )
            .map_err(err_str)?;

            let seed = run.seed;
            if (base.corr.abs() - flipped.corr.abs()).abs() > 1e-9 {
                return Err(format!("seed {seed}: |corr| changed under negation"));
            }
            if (base.drift_rmse - flipped.drift_rmse).abs() > 1e-9 {
                return Err(format!("seed {seed}: drift RMSE changed under negation"));
            }
            if (base.diff_rmse - flipped.diff_rmse).abs() > 1e-9 {
                return Err(format!("seed {seed}: diffusion RMSE changed under negation"));
            }
            let mut a = base.drift_zero_crossings.clone();
            let mut b = flipped.drift_zero_crossings.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            if a.len() != b.len()
                || a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9)
            {
                return Err(format!("seed {seed}: zero-crossing set changed under negation"));
            }
        }
        Ok(format!("all {} seeds invariant under latent negation", d.runs.len()))
    })());
}

#[test]
fn criterion_6_determinism() {
    verdict(6, "determinism", (|| {
        let d = discovery()?;
        let run = &d.runs[0];
        let system = double_well_system();

        let (params, trace) =
            train(&d.dataset, &d.cfg.train_for_seed(run.seed)).map_err(err_str)?;
        let report = evaluate_run(
            &params,
            &d.dataset,
            &system,
            &d.cfg.train.estimator,
            &d.cfg.eval,
            run.seed,
        )
        .map_err(err_str)?;

        // Bit-level comparison of every reproducible trace field; wall
        // clock is the one field deliberately outside the guarantee.
        if trace.len() != run.trace.len() {
            return Err(format!(
                "trace lengths differ: {} vs {}",
                trace.len(),
                run.trace.len()
            ));
        }
        for (a, b) in trace.records.iter().zip(&run.trace.records) {
            let same = a.step == b.step
                && a.loss.to_bits() == b.loss.to_bits()
                && a.loss_per_pixel.to_bits() == b.loss_per_pixel.to_bits()
                && a.refreshed == b.refreshed
                && a.fallback_queries == b.fallback_queries;
            if !same {
                return Err(format!("loss trace diverges at step {}", a.step));
            }
        }
        if report != run.report {
            return Err("run report differs between repeats".into());
        }
        Ok(format!("seed {} trace and report bit-identical", run.seed))
    })());
}

#[test]
fn criterion_7_format_round_trips() {
    verdict(7, "format round trips", (|| {
        let d = discovery()?;
        let run = &d.runs[0];
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let hash = d.cfg.hash();

        let reread = |path: &std::path::Path| -> Result<Vec<u8>, String> {
            std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
        };

        // Dataset: JSON header and binary payload, byte-for-byte.
        let ds_a = dir.path().join("ds_a.json");
        let ds_b = dir.path().join("ds_b.json");
        artifact::save_dataset(&d.dataset, &ds_a, Some(&hash)).map_err(err_str)?;
        let (loaded, loaded_hash) = artifact::load_dataset(&ds_a).map_err(err_str)?;
        artifact::save_dataset(&loaded, &ds_b, loaded_hash.as_deref()).map_err(err_str)?;
        if reread(&ds_a)? != reread(&ds_b)?
            || reread(&artifact::payload_path(&ds_a))? != reread(&artifact::payload_path(&ds_b))?
        {
            return Err("dataset round trip is not byte-exact".into());
        }

        // Checkpoint.
        let meta = CheckpointMeta {
            seed: run.seed,
            step: run.trace.len(),
            train: d.cfg.train_for_seed(run.seed),
            config_hash: Some(hash.clone()),
        };
        let ck_a = dir.path().join("ck_a.json");
        let ck_b = dir.path().join("ck_b.json");
        artifact::save_checkpoint(&run.params, &meta, &ck_a).map_err(err_str)?;
        let (params, meta_back) = artifact::load_checkpoint(&ck_a).map_err(err_str)?;
        artifact::save_checkpoint(&params, &meta_back, &ck_b).map_err(err_str)?;
        if reread(&ck_a)? != reread(&ck_b)?
            || reread(&artifact::payload_path(&ck_a))? != reread(&artifact::payload_path(&ck_b))?
        {
            return Err("checkpoint round trip is not byte-exact".into());
        }

        // Report.
        let rp_a = dir.path().join("rp_a.json");
        let rp_b = dir.path().join("rp_b.json");
        artifact::save_report(&run.report, &rp_a).map_err(err_str)?;
        let report = artifact::load_report(&rp_a).map_err(err_str)?;
        artifact::save_report(&report, &rp_b).map_err(err_str)?;
        if reread(&rp_a)? != reread(&rp_b)? {
            return Err("report round trip is not byte-exact".into());
        }

        // Remote-protocol handshake against the bundled echo double.
        let server = remote::EchoServer::spawn().map_err(err_str)?;
        remote::protocol_check(&server.endpoint(), remote::DEFAULT_TIMEOUT).map_err(err_str)?;

        Ok("dataset, checkpoint, and report byte-exact; handshake ok".into())
    })());
}
