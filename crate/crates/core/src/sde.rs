//! Stochastic differential equation systems and Euler-Maruyama simulation.
//!
//! A system is `dx = f(x) dt + diag(sqrt(g(x))) dW` with drift `f` and
//! per-dimension squared diffusion `g` (diagonal noise). The stepper draws
//! one standard normal per dimension per step from a counter-seeded
//! generator, so a trajectory is a pure function of its seed and draws made
//! elsewhere can never shift it.

use std::sync::Arc;

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{counter_rng, stream};

type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// An SDE with drift and diagonal squared diffusion.
#[derive(Clone)]
pub struct SdeSystem {
    dim: usize,
    name: String,
    drift: FieldFn,
    diffusion_sq: FieldFn,
}

impl SdeSystem {
    /// Wraps drift and squared-diffusion field functions.
    ///
    /// `diffusion_sq` outputs are clamped at zero when evaluated, so field
    /// definitions may go negative from roundoff without poisoning sqrt.
    pub fn new(
        dim: usize,
        name: impl Into<String>,
        drift: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion_sq: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        assert!(dim > 0, "dimension must be positive");
        SdeSystem {
            dim,
            name: name.into(),
            drift: Arc::new(drift),
            diffusion_sq: Arc::new(diffusion_sq),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Evaluates the drift field into `out`.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(out.len(), self.dim);
        (self.drift)(x, out);
    }

    /// Evaluates the squared diffusion into `out`, clamped at 0.
    pub fn diffusion_sq(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(out.len(), self.dim);
        (self.diffusion_sq)(x, out);
        for v in out.iter_mut() {
            *v = v.max(0.0);
        }
    }

    /// Allocating convenience wrapper around [`SdeSystem::drift`].
    pub fn drift_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift(x, &mut out);
        out
    }

    /// Allocating convenience wrapper around [`SdeSystem::diffusion_sq`].
    pub fn diffusion_sq_at(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.diffusion_sq(x, &mut out);
        out
    }
}

impl std::fmt::Debug for SdeSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeSystem")
            .field("dim", &self.dim)
            .field("name", &self.name)
            .finish()
    }
}

/// The 1D double well: drift `4(x - x^3)`, squared diffusion
/// `max(4 - 1.25 x^2, 0)`.
///
/// Stable equilibria sit at x = ±1; the noise vanishes for
/// |x| >= sqrt(3.2) ≈ 1.789 while the drift still points inward there, so
/// trajectories stay bounded.
pub fn double_well_system() -> SdeSystem {
    SdeSystem::new(
        1,
        "double-well",
        |x, out| out[0] = 4.0 * (x[0] - x[0].powi(3)),
        |x, out| out[0] = (4.0 - 1.25 * x[0] * x[0]).max(0.0),
    )
}

/// Simulation parameters for one trajectory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Integration time step (time units).
    pub dt: f64,
    /// Number of stored states, including the initial one.
    pub n_steps: usize,
    /// Initial latent point; length fixes the state dimension.
    pub x0: Vec<f64>,
    /// Seed controlling all noise increments.
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("sim.dt must be positive, got {}", self.dt)));
        }
        if self.n_steps < 1 {
            return Err(Error::Config("sim.n_steps must be >= 1".into()));
        }
        if self.x0.is_empty() {
            return Err(Error::Config("sim.x0 must be non-empty".into()));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sim.x0 must be finite".into()));
        }
        Ok(())
    }
}

/// A time-stamped latent state sequence; timestamps are implied as `i * dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    dim: usize,
    dt: f64,
    /// Row-major states, `len = n_states * dim`.
    data: Vec<f64>,
    seed: Option<u64>,
}

impl Trajectory {
    /// Builds a trajectory from flat row-major state data.
    pub fn from_flat(dim: usize, dt: f64, data: Vec<f64>, seed: Option<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("trajectory dimension must be positive".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("trajectory dt must be positive".into()));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::Config(format!(
                "trajectory data length {} is not a positive multiple of dim {}",
                data.len(),
                dim
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite trajectory state at step {}",
                i / dim
            )));
        }
        Ok(Trajectory { dim, dt, data, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Number of stored states.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// One coordinate as a contiguous column copy.
    pub fn component(&self, k: usize) -> Vec<f64> {
        assert!(k < self.dim);
        self.data.iter().skip(k).step_by(self.dim).copied().collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Zero-copy (n_states, dim) view.
    pub fn as_array(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.len(), self.dim), &self.data)
            .expect("trajectory data is rectangular by construction")
    }
}

/// Integrates `system` with the Euler-Maruyama scheme.
///
/// `states[i+1] = states[i] + dt * f(states[i]) + sqrt(dt * g(states[i])) .* eps_i`
/// with independent standard-normal `eps_i` per dimension. A trajectory of
/// `n_steps` states contains `n_steps - 1` transitions.
pub fn euler_maruyama(system: &SdeSystem, config: &SimConfig) -> Result<Trajectory> {
    config.validate()?;
    let d = system.dim();
    if config.x0.len() != d {
        return Err(Error::Config(format!(
            "x0 has length {} but system '{}' has dimension {}",
            config.x0.len(),
            system.name(),
            d
        )));
    }

    let n = config.n_steps;
    let mut data = Vec::with_capacity(n * d);
    let mut x = config.x0.clone();
    let mut f = vec![0.0; d];
    let mut g = vec![0.0; d];
    data.extend_from_slice(&x);

    for step in 0..n.saturating_sub(1) {
        system.drift(&x, &mut f);
        system.diffusion_sq(&x, &mut g);
        let mut rng = counter_rng(config.seed, stream::SIM, step as u64);
        for k in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            x[k] += config.dt * f[k] + (config.dt * g[k]).max(0.0).sqrt() * eps;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite state at step {} (diverging system or step size)",
                step + 1
            )));
        }
        data.extend_from_slice(&x);
    }

    Trajectory::from_flat(d, config.dt, data, Some(config.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn frozen_system() -> SdeSystem {
        SdeSystem::new(1, "frozen", |_, out| out[0] = 0.0, |_, out| out[0] = 0.0)
    }

    #[test]
    fn double_well_fields_match_closed_forms() {
        let sys = double_well_system();
        assert_eq!(sys.dim(), 1);
        assert_eq!(sys.drift_at(&[1.0])[0], 0.0);
        assert_eq!(sys.drift_at(&[0.5])[0], 1.5);
        assert_eq!(sys.diffusion_sq_at(&[0.0])[0], 4.0);
        assert_eq!(sys.diffusion_sq_at(&[2.0])[0], 0.0);
    }

    #[test]
    fn frozen_dynamics_keep_the_state() {
        let traj = euler_maruyama(
            &frozen_system(),
            &SimConfig { dt: 0.1, n_steps: 20, x0: vec![0.7], seed: 1 },
        )
        .unwrap();
        assert_eq!(traj.len(), 20);
        assert!(traj.states().all(|s| s == [0.7]));
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With x0 = 0 the double-well drift vanishes and diffusion_sq = 4,
        // so state_1 = sqrt(dt * 4) * eps_0 exactly.
        let cfg = SimConfig { dt: 0.002, n_steps: 2, x0: vec![0.0], seed: 42 };
        let traj = euler_maruyama(&double_well_system(), &cfg).unwrap();
        let mut rng = counter_rng(42, stream::SIM, 0);
        let eps: f64 = rng.sample(StandardNormal);
        assert_eq!(traj.state(1)[0], 0.008f64.sqrt() * eps);
        // Unit draw would give sqrt(0.008) ≈ 0.0894427.
        assert_relative_eq!(0.008f64.sqrt(), 0.089442719, max_relative = 1e-7);
    }

    #[test]
    fn identical_seeds_reproduce_bitwise() {
        let cfg = SimConfig { dt: 0.002, n_steps: 500, x0: vec![0.0], seed: 9 };
        let a = euler_maruyama(&double_well_system(), &cfg).unwrap();
        let b = euler_maruyama(&double_well_system(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let mk = |seed| {
            euler_maruyama(
                &double_well_system(),
                &SimConfig { dt: 0.002, n_steps: 50, x0: vec![0.0], seed },
            )
            .unwrap()
        };
        assert_ne!(mk(1), mk(2));
    }

    #[test]
    fn zero_diffusion_reduces_to_forward_euler() {
        let sys = SdeSystem::new(
            1,
            "ode",
            |x, out| out[0] = -2.0 * x[0],
            |_, out| out[0] = 0.0,
        );
        let cfg = SimConfig { dt: 0.01, n_steps: 100, x0: vec![1.0], seed: 0 };
        let traj = euler_maruyama(&sys, &cfg).unwrap();
        let mut x = 1.0;
        for i in 0..100 {
            assert_eq!(traj.state(i)[0], x);
            x += 0.01 * (-2.0 * x);
        }
    }

    #[test]
    fn divergence_is_reported_with_step_index() {
        // Exponential blow-up: x' = x^3 with big dt overflows quickly.
        let sys = SdeSystem::new(
            1,
            "blowup",
            |x, out| out[0] = x[0].powi(3),
            |_, out| out[0] = 0.0,
        );
        let cfg = SimConfig { dt: 10.0, n_steps: 10_000, x0: vec![2.0], seed: 0 };
        let err = euler_maruyama(&sys, &cfg).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("step"), "message: {msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let sys = double_well_system();
        let bad_dt = SimConfig { dt: 0.0, n_steps: 5, x0: vec![0.0], seed: 0 };
        assert!(matches!(euler_maruyama(&sys, &bad_dt), Err(Error::Config(_))));
        let bad_steps = SimConfig { dt: 0.1, n_steps: 0, x0: vec![0.0], seed: 0 };
        assert!(matches!(euler_maruyama(&sys, &bad_steps), Err(Error::Config(_))));
        let bad_dim = SimConfig { dt: 0.1, n_steps: 5, x0: vec![0.0, 0.0], seed: 0 };
        assert!(matches!(euler_maruyama(&sys, &bad_dim), Err(Error::Config(_))));
    }

    #[test]
    fn double_well_stays_bounded_over_a_long_run() {
        // Diffusion vanishes for |x| >= sqrt(3.2) and the drift points
        // inward there, so the state cannot escape past 2.
        let cfg = SimConfig { dt: 0.002, n_steps: 1_000_000, x0: vec![0.0], seed: 0 };
        let traj = euler_maruyama(&double_well_system(), &cfg).unwrap();
        let sup = traj.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(sup < 2.0, "sup |x| = {sup}");
    }

    #[test]
    fn component_extracts_columns() {
        let traj = Trajectory::from_flat(2, 0.1, vec![1.0, 2.0, 3.0, 4.0], None).unwrap();
        assert_eq!(traj.component(0), vec![1.0, 3.0]);
        assert_eq!(traj.component(1), vec![2.0, 4.0]);
    }

    proptest! {
        #[test]
        fn trajectory_length_always_matches_n_steps(
            n in 1usize..200,
            seed in any::<u64>(),
            dt in 1e-4f64..0.01,
        ) {
            let cfg = SimConfig { dt, n_steps: n, x0: vec![0.0], seed };
            let traj = euler_maruyama(&double_well_system(), &cfg).unwrap();
            prop_assert_eq!(traj.len(), n);
            prop_assert!(traj.data().iter().all(|v| v.is_finite()));
        }

        #[test]
        fn diffusion_sq_is_clamped_nonnegative(x in -3.0f64..3.0) {
            let sys = double_well_system();
            prop_assert!(sys.diffusion_sq_at(&[x])[0] >= 0.0);
        }
    }
}
