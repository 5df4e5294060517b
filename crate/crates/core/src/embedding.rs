//! Synthetic video embedding: renders 1D latent states as Gaussian-blob
//! frames and bundles them into an observation dataset.
//!
//! The blob center moves horizontally with the latent value; geometry is
//! configurable so the same renderer covers the default 51x51 grid and the
//! tiny grids used in tests. Rendering is deterministic and noise-free.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::Trajectory;

/// Geometry of the rendered Gaussian blob.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BlobConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Blob standard deviation in pixels.
    pub sigma_px: f64,
    /// Horizontal pixels per latent unit.
    pub scale_px: f64,
    /// Continuous pixel coordinates of the blob center at x = 0.
    pub center_row: f64,
    pub center_col: f64,
    /// Peak intensity.
    pub amplitude: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            grid_h: 51,
            grid_w: 51,
            sigma_px: 2.5,
            scale_px: 10.0,
            center_row: 25.0,
            center_col: 25.0,
            amplitude: 1.0,
        }
    }
}

impl BlobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("blob grid dimensions must be positive".into()));
        }
        if !(self.sigma_px > 0.0) {
            return Err(Error::Config(format!(
                "blob.sigma_px must be positive, got {}",
                self.sigma_px
            )));
        }
        if self.scale_px == 0.0 || !self.scale_px.is_finite() {
            return Err(Error::Config("blob.scale_px must be nonzero and finite".into()));
        }
        if !(self.amplitude > 0.0) {
            return Err(Error::Config("blob.amplitude must be positive".into()));
        }
        if !self.center_row.is_finite() || !self.center_col.is_finite() {
            return Err(Error::Config("blob center must be finite".into()));
        }
        Ok(())
    }

    /// Number of pixels per frame.
    pub fn pixel_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// One rendered frame; intensities in `[0, amplitude]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGrid {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl FrameGrid {
    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.w + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Renders the frame for latent value `x`.
///
/// `values[r][c] = amplitude * exp(-((c - c0)^2 + (r - center_row)^2) / (2 sigma^2))`
/// with continuous blob center `c0 = center_col + scale_px * x`. The blob may
/// exit the frame; intensities simply decay toward zero.
pub fn render_blob(x: f64, cfg: &BlobConfig) -> FrameGrid {
    // Separable Gaussian: one exp per row and per column instead of per pixel.
    let c0 = cfg.center_col + cfg.scale_px * x;
    let inv_two_sigma_sq = 1.0 / (2.0 * cfg.sigma_px * cfg.sigma_px);
    let col_factors: Vec<f64> = (0..cfg.grid_w)
        .map(|c| (-(c as f64 - c0).powi(2) * inv_two_sigma_sq).exp())
        .collect();
    let row_factors: Vec<f64> = (0..cfg.grid_h)
        .map(|r| (-(r as f64 - cfg.center_row).powi(2) * inv_two_sigma_sq).exp())
        .collect();
    let mut values = Vec::with_capacity(cfg.pixel_count());
    for rf in &row_factors {
        let a = cfg.amplitude * rf;
        values.extend(col_factors.iter().map(|cf| a * cf));
    }
    FrameGrid { h: cfg.grid_h, w: cfg.grid_w, values }
}

/// The observation sequence: ordered frames plus timestep metadata.
///
/// `source_latent` is kept for evaluation only; the training stage receives
/// frames and `dt` and never reads it.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDataset {
    frames: Array2<f64>,
    grid_h: usize,
    grid_w: usize,
    dt: f64,
    blob: BlobConfig,
    source_latent: Option<Trajectory>,
}

impl VideoDataset {
    pub fn new(
        frames: Array2<f64>,
        grid_h: usize,
        grid_w: usize,
        dt: f64,
        blob: BlobConfig,
        source_latent: Option<Trajectory>,
    ) -> Result<Self> {
        if frames.nrows() < 2 {
            return Err(Error::Config("dataset needs at least 2 frames".into()));
        }
        if frames.ncols() != grid_h * grid_w {
            return Err(Error::Config(format!(
                "frame width {} does not match grid {}x{}",
                frames.ncols(),
                grid_h,
                grid_w
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("dataset dt must be positive".into()));
        }
        Ok(VideoDataset { frames, grid_h, grid_w, dt, blob, source_latent })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    /// Flattened observation dimension (pixels per frame).
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn blob(&self) -> &BlobConfig {
        &self.blob
    }

    pub fn frame(&self, i: usize) -> ArrayView1<'_, f64> {
        self.frames.row(i)
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn source_latent(&self) -> Option<&Trajectory> {
        self.source_latent.as_ref()
    }
}

/// Renders every state of a 1D trajectory into a dataset.
pub fn embed_trajectory(traj: &Trajectory, cfg: &BlobConfig) -> Result<VideoDataset> {
    cfg.validate()?;
    if traj.dim() != 1 {
        return Err(Error::Config(format!(
            "blob renderer expects 1D latents, trajectory has dimension {}",
            traj.dim()
        )));
    }
    let d = cfg.pixel_count();
    let mut frames = Array2::zeros((traj.len(), d));
    for (i, state) in traj.states().enumerate() {
        let frame = render_blob(state[0], cfg);
        frames.row_mut(i).assign(&ArrayView1::from(frame.as_slice()));
    }
    VideoDataset::new(frames, cfg.grid_h, cfg.grid_w, traj.dt(), cfg.clone(), Some(traj.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{double_well_system, euler_maruyama, SimConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn centered_blob_peaks_at_center_and_is_symmetric() {
        let cfg = BlobConfig::default();
        let frame = render_blob(0.0, &cfg);
        assert_eq!(frame.value(25, 25), 1.0);
        for r in 0..51 {
            for c in 0..25 {
                assert_eq!(frame.value(r, c), frame.value(r, 50 - c));
            }
        }
    }

    #[test]
    fn latent_unit_moves_peak_by_scale_px() {
        let cfg = BlobConfig::default();
        let frame = render_blob(1.0, &cfg);
        let row25: Vec<f64> = (0..51).map(|c| frame.value(25, c)).collect();
        let argmax = row25
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 35);
    }

    #[test]
    fn gaussian_falloff_ratio() {
        let cfg = BlobConfig::default();
        let frame = render_blob(0.0, &cfg);
        // Five pixels from center with sigma 2.5: exp(-25 / 12.5) = exp(-2).
        assert_relative_eq!(
            frame.value(25, 30) / frame.value(25, 25),
            (-2.0f64).exp(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn constant_trajectory_gives_identical_frames() {
        let traj = Trajectory::from_flat(1, 0.1, vec![0.3; 5], None).unwrap();
        let ds = embed_trajectory(&traj, &BlobConfig::default()).unwrap();
        for i in 1..5 {
            assert_eq!(ds.frame(i), ds.frame(0));
        }
    }

    #[test]
    fn default_dataset_frames_stay_near_peak_amplitude() {
        // Off-grid peak attenuation at sigma 2.5 is at most
        // exp(-0.5^2 / (2 * 2.5^2)) ≈ 0.98, so every frame max exceeds 0.9.
        let cfg = SimConfig { dt: 0.002, n_steps: 500, x0: vec![0.0], seed: 11 };
        let traj = euler_maruyama(&double_well_system(), &cfg).unwrap();
        let ds = embed_trajectory(&traj, &BlobConfig::default()).unwrap();
        for i in 0..ds.n_frames() {
            let m = ds.frame(i).iter().cloned().fold(0.0f64, f64::max);
            assert!(m > 0.9 && m <= 1.0, "frame {i} max {m}");
        }
    }

    #[test]
    fn rejects_non_1d_trajectories() {
        let traj = Trajectory::from_flat(2, 0.1, vec![0.0; 8], None).unwrap();
        assert!(matches!(
            embed_trajectory(&traj, &BlobConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_invalid_blob_configs() {
        let traj = Trajectory::from_flat(1, 0.1, vec![0.0; 4], None).unwrap();
        for bad in [
            BlobConfig { sigma_px: 0.0, ..Default::default() },
            BlobConfig { scale_px: 0.0, ..Default::default() },
            BlobConfig { amplitude: 0.0, ..Default::default() },
            BlobConfig { grid_w: 0, ..Default::default() },
        ] {
            assert!(matches!(embed_trajectory(&traj, &bad), Err(Error::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn intensities_stay_in_unit_interval(x in -3.0f64..3.0) {
            let cfg = BlobConfig::default();
            let frame = render_blob(x, &cfg);
            prop_assert!(frame.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn integer_pixel_shifts_translate_the_frame_exactly(
            j in -48i32..=48,
            shift_px in 1usize..4,
        ) {
            // Dyadic latents and a power-of-two scale keep the center
            // arithmetic exact, so a shift by scale_px * delta = shift_px
            // columns reproduces the overlap bit for bit.
            let cfg = BlobConfig { scale_px: 8.0, ..Default::default() };
            let x = f64::from(j) / 64.0;
            let delta = shift_px as f64 / cfg.scale_px;
            let a = render_blob(x, &cfg);
            let b = render_blob(x + delta, &cfg);
            for r in 0..cfg.grid_h {
                for c in 0..cfg.grid_w - shift_px {
                    prop_assert_eq!(a.value(r, c), b.value(r, c + shift_px));
                }
            }
        }

        #[test]
        fn peak_equals_amplitude_iff_center_is_on_grid(x in -1.5f64..1.5) {
            let cfg = BlobConfig::default();
            let frame = render_blob(x, &cfg);
            let max = frame.as_slice().iter().cloned().fold(0.0f64, f64::max);
            let c0 = cfg.center_col + cfg.scale_px * x;
            let on_grid = (c0 - c0.round()).abs() < 1e-12 && c0 >= 0.0 && c0 <= 50.0;
            if on_grid {
                prop_assert!((max - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(max < 1.0);
            }
        }
    }
}
