//! Self-contained SVG plots, written without a plotting dependency so the
//! binary stays headless-friendly. Output is deterministic: the same inputs
//! produce byte-identical markup.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{AggregateSummary, FieldCurve};
use crate::sde::SdeSystem;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 280.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_TOP: f64 = 46.0;
const PANEL_GAP: f64 = 84.0;
const MARGIN_BOTTOM: f64 = 54.0;

const TRUTH_STROKE: &str = "#333333";
const ESTIMATE_STROKE: &str = "#e66100";
const BAND_FILL: &str = "#e66100";

/// One plotting surface inside the SVG canvas.
struct Panel {
    x0: f64,
    y0: f64,
}

/// Inclusive data range with a 5% margin on each side.
#[derive(Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of<'a>(values: impl Iterator<Item = &'a f64>) -> Result<Range> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in values {
            if !v.is_finite() {
                return Err(Error::Numeric("non-finite value in plot data".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Err(Error::Config("cannot plot an empty series".into()));
        }
        if hi - lo < 1e-12 {
            // Degenerate span: widen so the flat line sits mid-panel.
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Ok(Range { lo: lo - pad, hi: hi + pad })
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

impl Panel {
    fn px(&self, xr: Range, u: f64) -> f64 {
        self.x0 + xr.frac(u) * PANEL_W
    }

    /// SVG y grows downward; data y grows upward.
    fn py(&self, yr: Range, v: f64) -> f64 {
        self.y0 + (1.0 - yr.frac(v)) * PANEL_H
    }

    fn points(&self, xr: Range, yr: Range, xs: &[f64], ys: &[f64]) -> String {
        let mut s = String::new();
        for (u, v) in xs.iter().zip(ys) {
            if !s.is_empty() {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", self.px(xr, *u), self.py(yr, *v));
        }
        s
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// The three curve kinds a panel can hold, drawn back to front.
struct PanelSeries<'a> {
    band: Option<(&'a [f64], &'a [f64])>,
    truth: Option<&'a [f64]>,
    estimate: &'a [f64],
}

fn render_panel(
    out: &mut String,
    panel: &Panel,
    title: &str,
    grid: &[f64],
    series: &PanelSeries<'_>,
) -> Result<()> {
    let xr = Range::of(grid.iter())?;
    let mut all: Vec<f64> = series.estimate.to_vec();
    if let Some(t) = series.truth {
        all.extend_from_slice(t);
    }
    if let Some((lo, hi)) = series.band {
        all.extend_from_slice(lo);
        all.extend_from_slice(hi);
    }
    let yr = Range::of(all.iter())?;

    let _ = writeln!(
        out,
        r##"  <rect x="{:.2}" y="{:.2}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#cccccc"/>"##,
        panel.x0, panel.y0
    );
    let _ = writeln!(
        out,
        r#"  <text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>"#,
        panel.x0 + PANEL_W / 2.0,
        panel.y0 - 12.0
    );

    // Zero line when the range straddles it, as a visual anchor.
    if yr.lo < 0.0 && yr.hi > 0.0 {
        let y = panel.py(yr, 0.0);
        let _ = writeln!(
            out,
            r##"  <line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##,
            panel.x0,
            panel.x0 + PANEL_W
        );
    }

    if let Some((lo, hi)) = series.band {
        // Polygon tracing the lower edge forward and the upper edge back.
        let rev_grid: Vec<f64> = grid.iter().rev().copied().collect();
        let rev_hi: Vec<f64> = hi.iter().rev().copied().collect();
        let mut pts = panel.points(xr, yr, grid, lo);
        pts.push(' ');
        pts.push_str(&panel.points(xr, yr, &rev_grid, &rev_hi));
        let _ = writeln!(
            out,
            r#"  <polygon points="{pts}" fill="{BAND_FILL}" fill-opacity="0.25" stroke="none"/>"#
        );
    }
    if let Some(truth) = series.truth {
        let _ = writeln!(
            out,
            r#"  <polyline points="{}" fill="none" stroke="{TRUTH_STROKE}" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
            panel.points(xr, yr, grid, truth)
        );
    }
    let _ = writeln!(
        out,
        r#"  <polyline points="{}" fill="none" stroke="{ESTIMATE_STROKE}" stroke-width="1.8"/>"#,
        panel.points(xr, yr, grid, series.estimate)
    );

    // Corner tick labels: x range below, y range on the left edge.
    let label = |out: &mut String, x: f64, y: f64, anchor: &str, text: String| {
        let _ = writeln!(
            out,
            r##"  <text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="11" fill="#555555">{text}</text>"##
        );
    };
    let below = panel.y0 + PANEL_H + 16.0;
    label(out, panel.x0, below, "middle", fmt_tick(xr.lo));
    label(out, panel.x0 + PANEL_W, below, "middle", fmt_tick(xr.hi));
    label(out, panel.x0 + PANEL_W / 2.0, below + 16.0, "middle", "u".to_string());
    label(out, panel.x0 - 6.0, panel.y0 + PANEL_H, "end", fmt_tick(yr.lo));
    label(out, panel.x0 - 6.0, panel.y0 + 11.0, "end", fmt_tick(yr.hi));
    Ok(())
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n  <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

fn legend(out: &mut String, x: f64, y: f64, with_band: bool) {
    let _ = writeln!(
        out,
        r#"  <line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{TRUTH_STROKE}" stroke-width="1.5" stroke-dasharray="6 4"/>"#,
        x + 26.0
    );
    let _ = writeln!(
        out,
        r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="12">truth</text>"#,
        x + 32.0,
        y + 4.0
    );
    let _ = writeln!(
        out,
        r#"  <line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{ESTIMATE_STROKE}" stroke-width="1.8"/>"#,
        x + 84.0,
        x + 110.0
    );
    let _ = writeln!(
        out,
        r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="12">estimate</text>"#,
        x + 116.0,
        y + 4.0
    );
    if with_band {
        let _ = writeln!(
            out,
            r#"  <rect x="{}" y="{}" width="26" height="10" fill="{BAND_FILL}" fill-opacity="0.25"/>"#,
            x + 186.0,
            y - 5.0
        );
        let _ = writeln!(
            out,
            r#"  <text x="{}" y="{}" font-family="sans-serif" font-size="12">5-95%</text>"#,
            x + 218.0,
            y + 4.0
        );
    }
}

fn two_panel_svg(
    grid: &[f64],
    drift: PanelSeries<'_>,
    diff_sq: PanelSeries<'_>,
    with_band_legend: bool,
) -> Result<String> {
    let width = MARGIN_LEFT + PANEL_W + PANEL_GAP + PANEL_W + 24.0;
    let height = MARGIN_TOP + PANEL_H + MARGIN_BOTTOM;
    let mut out = svg_open(width, height);
    let left = Panel { x0: MARGIN_LEFT, y0: MARGIN_TOP };
    let right = Panel { x0: MARGIN_LEFT + PANEL_W + PANEL_GAP, y0: MARGIN_TOP };
    render_panel(&mut out, &left, "drift f(u)", grid, &drift)?;
    render_panel(&mut out, &right, "squared diffusion g(u)", grid, &diff_sq)?;
    legend(&mut out, MARGIN_LEFT, height - 14.0, with_band_legend);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Truth values of both fields along `grid` for a 1D system.
fn truth_curves(system: &SdeSystem, grid: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if system.dim() != 1 {
        return Err(Error::Config("field plots support 1D systems".into()));
    }
    let drift = grid.iter().map(|&u| system.drift_at(&[u])[0]).collect();
    let diff_sq = grid.iter().map(|&u| system.diffusion_sq_at(&[u])[0]).collect();
    Ok((drift, diff_sq))
}

/// Single-run overlay: dashed analytic truth, solid aligned estimate.
pub fn field_overlay_svg(estimate: &FieldCurve, system: &SdeSystem) -> Result<String> {
    estimate.validate()?;
    if estimate.grid.is_empty() {
        return Err(Error::Config("cannot plot an empty field curve".into()));
    }
    let (truth_f, truth_g) = truth_curves(system, &estimate.grid)?;
    two_panel_svg(
        &estimate.grid,
        PanelSeries { band: None, truth: Some(&truth_f), estimate: &estimate.drift },
        PanelSeries { band: None, truth: Some(&truth_g), estimate: &estimate.diff_sq },
        false,
    )
}

/// Multi-seed overlay: percentile band, mean estimate, dashed truth.
pub fn aggregate_overlay_svg(agg: &AggregateSummary, system: &SdeSystem) -> Result<String> {
    let n = agg.grid.len();
    if n == 0 {
        return Err(Error::Config("cannot plot an empty aggregate".into()));
    }
    for (name, v) in [
        ("drift_mean", &agg.drift_mean),
        ("drift_lo", &agg.drift_lo),
        ("drift_hi", &agg.drift_hi),
        ("diff_sq_mean", &agg.diff_sq_mean),
        ("diff_sq_lo", &agg.diff_sq_lo),
        ("diff_sq_hi", &agg.diff_sq_hi),
    ] {
        if v.len() != n {
            return Err(Error::Config(format!("aggregate column {name} length mismatch")));
        }
    }
    let (truth_f, truth_g) = truth_curves(system, &agg.grid)?;
    two_panel_svg(
        &agg.grid,
        PanelSeries {
            band: Some((&agg.drift_lo, &agg.drift_hi)),
            truth: Some(&truth_f),
            estimate: &agg.drift_mean,
        },
        PanelSeries {
            band: Some((&agg.diff_sq_lo, &agg.diff_sq_hi)),
            truth: Some(&truth_g),
            estimate: &agg.diff_sq_mean,
        },
        true,
    )
}

/// Training-loss curve over steps. Positive losses are drawn on a log10
/// scale; otherwise the scale falls back to linear.
pub fn loss_trace_svg(points: &[(usize, f64)]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Config("cannot plot an empty loss trace".into()));
    }
    let log_scale = points.iter().all(|&(_, l)| l > 0.0);
    let steps: Vec<f64> = points.iter().map(|&(s, _)| s as f64).collect();
    let ys: Vec<f64> = points
        .iter()
        .map(|&(_, l)| if log_scale { l.log10() } else { l })
        .collect();
    let xr = Range::of(steps.iter())?;
    let yr = Range::of(ys.iter())?;

    let width = MARGIN_LEFT + PANEL_W + 24.0;
    let height = MARGIN_TOP + PANEL_H + MARGIN_BOTTOM;
    let mut out = svg_open(width, height);
    let panel = Panel { x0: MARGIN_LEFT, y0: MARGIN_TOP };
    let _ = writeln!(
        out,
        r##"  <rect x="{:.2}" y="{:.2}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#cccccc"/>"##,
        panel.x0, panel.y0
    );
    let title = if log_scale { "training loss (log scale)" } else { "training loss" };
    let _ = writeln!(
        out,
        r#"  <text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="15">{title}</text>"#,
        panel.x0 + PANEL_W / 2.0,
        panel.y0 - 12.0
    );
    let _ = writeln!(
        out,
        r#"  <polyline points="{}" fill="none" stroke="{ESTIMATE_STROKE}" stroke-width="1.5"/>"#,
        panel.points(xr, yr, &steps, &ys)
    );
    let y_label = |v: f64| if log_scale { format!("{:.2e}", 10f64.powf(v)) } else { fmt_tick(v) };
    let below = panel.y0 + PANEL_H + 16.0;
    let label = |out: &mut String, x: f64, y: f64, anchor: &str, text: String| {
        let _ = writeln!(
            out,
            r##"  <text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="11" fill="#555555">{text}</text>"##
        );
    };
    label(&mut out, panel.x0, below, "middle", fmt_tick(xr.lo));
    label(&mut out, panel.x0 + PANEL_W, below, "middle", fmt_tick(xr.hi));
    label(&mut out, panel.x0 + PANEL_W / 2.0, below + 16.0, "middle", "step".to_string());
    label(&mut out, panel.x0 - 6.0, panel.y0 + PANEL_H, "end", y_label(yr.lo));
    label(&mut out, panel.x0 - 6.0, panel.y0 + 11.0, "end", y_label(yr.hi));
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::aggregate_runs;
    use crate::eval::{AlignmentMap, RunReport};
    use crate::sde::double_well_system;

    fn sample_curve() -> FieldCurve {
        let grid: Vec<f64> = (0..33).map(|i| -1.2 + 0.075 * i as f64).collect();
        let drift = grid.iter().map(|u| 3.9 * (u - u.powi(3))).collect();
        let diff_sq = grid.iter().map(|u| (4.1 - 1.2 * u * u).max(0.0)).collect();
        FieldCurve { grid, drift, diff_sq }
    }

    #[test]
    fn overlay_has_two_panels_with_truth_and_estimate() {
        let svg = field_overlay_svg(&sample_curve(), &double_well_system()).unwrap();
        assert!(svg.starts_with("<svg xmlns"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 4, "2 panels x (truth + estimate)");
        assert_eq!(svg.matches("stroke-dasharray").count(), 3, "2 truth curves + legend");
        assert!(svg.contains("drift f(u)"));
        assert!(svg.contains("squared diffusion g(u)"));
        assert!(!svg.contains("<polygon"), "single run has no band");
    }

    #[test]
    fn rendering_is_deterministic() {
        let c = sample_curve();
        let sys = double_well_system();
        assert_eq!(field_overlay_svg(&c, &sys).unwrap(), field_overlay_svg(&c, &sys).unwrap());
    }

    #[test]
    fn aggregate_overlay_draws_band_polygons() {
        let reports: Vec<RunReport> = (0..2)
            .map(|s| RunReport {
                seed: s,
                alignment: AlignmentMap::identity(),
                corr: 0.95,
                drift_rmse: 0.3,
                diff_rmse: 0.2,
                drift_zero_crossings: vec![0.0],
                recon_mse_per_pixel: 1e-4,
                estimated: {
                    let mut c = sample_curve();
                    for v in &mut c.drift {
                        *v += 0.1 * s as f64;
                    }
                    c
                },
                trace_ref: None,
                config_hash: None,
            })
            .collect();
        let agg = aggregate_runs(&reports).unwrap();
        let svg = aggregate_overlay_svg(&agg, &double_well_system()).unwrap();
        assert_eq!(svg.matches("<polygon").count(), 2, "one band per panel");
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("5-95%"));
    }

    #[test]
    fn non_finite_curve_is_rejected() {
        let mut c = sample_curve();
        c.drift[3] = f64::NAN;
        let err = field_overlay_svg(&c, &double_well_system()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn loss_trace_uses_log_scale_for_positive_losses() {
        let pts: Vec<(usize, f64)> = (0..50).map(|i| (i, 10.0 * 0.9f64.powi(i as i32))).collect();
        let svg = loss_trace_svg(&pts).unwrap();
        assert!(svg.contains("log scale"));
        assert!(svg.contains("e0") || svg.contains("e-"), "labels show actual loss magnitudes");
        // One vertex per recorded step.
        let points_attr = svg.split("points=\"").nth(1).unwrap();
        let vertex_count = points_attr.split('"').next().unwrap().split(' ').count();
        assert_eq!(vertex_count, 50);
    }

    #[test]
    fn loss_trace_falls_back_to_linear_with_nonpositive_values() {
        let svg = loss_trace_svg(&[(0, 1.0), (1, 0.0), (2, -0.5)]).unwrap();
        assert!(!svg.contains("log scale"));
    }

    #[test]
    fn constant_loss_still_renders() {
        let svg = loss_trace_svg(&[(0, 2.0), (1, 2.0), (2, 2.0)]).unwrap();
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn empty_inputs_are_config_errors() {
        assert!(matches!(loss_trace_svg(&[]).unwrap_err(), Error::Config(_)));
        let empty = FieldCurve { grid: vec![], drift: vec![], diff_sq: vec![] };
        assert!(matches!(
            field_overlay_svg(&empty, &double_well_system()).unwrap_err(),
            Error::Config(_)
        ));
    }
}
