//! Minimal PNG charts: deviation traces with flags and triggers, and
//! per-frame candidate profiles.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_line_segment_mut, draw_hollow_rect_mut};
use imageproc::rect::Rect;
use loopwatch::metrics::ActionGrid;
use loopwatch::monitor::{MonitorConfig, MonitorReport, Which};
use loopwatch::{Error, Result};

const W: u32 = 900;
const H: u32 = 320;
const PAD: f32 = 30.0;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const TRACE: Rgb<u8> = Rgb([31, 90, 180]);
const FLAG: Rgb<u8> = Rgb([210, 30, 30]);
const TRIGGER: Rgb<u8> = Rgb([255, 200, 120]);
const THRESH: Rgb<u8> = Rgb([150, 150, 150]);
const ACTUAL: Rgb<u8> = Rgb([30, 150, 60]);

/// Maps data coordinates into the plotting area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f32 {
        let span = (self.x1 - self.x0).max(1e-12);
        PAD + ((x - self.x0) / span) as f32 * (W as f32 - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f32 {
        let span = (self.y1 - self.y0).max(1e-12);
        H as f32 - PAD - ((y - self.y0) / span) as f32 * (H as f32 - 2.0 * PAD)
    }
}

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, WHITE);
    let r = Rect::at(PAD as i32, PAD as i32).of_size(W - 2 * PAD as u32, H - 2 * PAD as u32);
    draw_hollow_rect_mut(&mut img, r, AXIS);
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<PathBuf> {
    img.save(path).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(path.to_path_buf())
}

fn polyline(img: &mut RgbImage, pts: &[(f32, f32)], color: Rgb<u8>) {
    for w in pts.windows(2) {
        draw_line_segment_mut(img, w[0], w[1], color);
    }
}

fn dashed_hline(img: &mut RgbImage, y: f32, color: Rgb<u8>) {
    let mut x = PAD;
    while x < W as f32 - PAD {
        draw_line_segment_mut(img, (x, y), ((x + 6.0).min(W as f32 - PAD), y), color);
        x += 12.0;
    }
}

/// Deviation over time for one monitor: shaded trigger intervals, the
/// threshold, the trace, and a dot on every flagged frame.
fn trace_plot(report: &MonitorReport, which: Which, tau: Option<f64>, path: &Path) -> Result<PathBuf> {
    let mut img = canvas();
    let devs: Vec<(usize, f64)> = report
        .rows
        .iter()
        .filter_map(|r| {
            let d = match which {
                Which::Cfam => r.cfam_dev,
                Which::Sfam => r.sfam_dev,
            };
            d.map(|d| (r.t, d))
        })
        .collect();
    let top = devs
        .iter()
        .map(|p| p.1)
        .chain(tau.filter(|t| t.is_finite()))
        .fold(0.0, f64::max)
        .max(1e-3)
        * 1.1;
    let f = Frame {
        x0: 0.0,
        x1: report.len().saturating_sub(1).max(1) as f64,
        y0: 0.0,
        y1: top,
    };
    let step = (W as f32 - 2.0 * PAD) / report.len().max(1) as f32;
    for (r, trig) in report.rows.iter().zip(report.trigger_signal(which)) {
        if trig {
            let x = f.px(r.t as f64) - step / 2.0;
            let rect = Rect::at(x as i32, PAD as i32 + 1).of_size(step.ceil().max(1.0) as u32, H - 2 * PAD as u32 - 2);
            draw_filled_rect_mut(&mut img, rect, TRIGGER);
        }
    }
    if let Some(t) = tau.filter(|t| t.is_finite()) {
        dashed_hline(&mut img, f.py(t), THRESH);
    }
    let pts: Vec<(f32, f32)> = devs.iter().map(|&(t, d)| (f.px(t as f64), f.py(d))).collect();
    polyline(&mut img, &pts, TRACE);
    for (r, flag) in report.rows.iter().zip(report.flags(which)) {
        if flag == Some(true) {
            let d = match which {
                Which::Cfam => r.cfam_dev,
                Which::Sfam => r.sfam_dev,
            }
            .unwrap_or(0.0);
            draw_filled_circle_mut(&mut img, (f.px(r.t as f64) as i32, f.py(d) as i32), 3, FLAG);
        }
    }
    save(&img, path)
}

/// One trace plot per monitor.
pub fn report_plots(report: &MonitorReport, config: Option<&MonitorConfig>, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.is_empty() {
        return Err(Error::invalid("report has no rows"));
    }
    Ok(vec![
        trace_plot(report, Which::Cfam, config.map(|c| c.tau_cfam), &dir.join("cfam_deviation.png"))?,
        trace_plot(report, Which::Sfam, config.map(|c| c.tau_sfam), &dir.join("sfam_deviation.png"))?,
    ])
}

/// Score per candidate action, with the executed command as a vertical
/// line and the best candidate marked.
pub fn profile_plot(grid: &ActionGrid, values: &[f64], actual: f64, path: &Path) -> Result<PathBuf> {
    if values.len() != grid.len() {
        return Err(Error::invalid("profile length differs from grid"));
    }
    let mut img = canvas();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = ((hi - lo) * 0.1).max(1e-6);
    let f = Frame {
        x0: grid.lo(),
        x1: grid.hi(),
        y0: lo - margin,
        y1: hi + margin,
    };
    let x = f.px(actual.clamp(grid.lo(), grid.hi()));
    draw_line_segment_mut(&mut img, (x, PAD), (x, H as f32 - PAD), ACTUAL);
    let pts: Vec<(f32, f32)> = grid.values().iter().zip(values).map(|(&g, &v)| (f.px(g), f.py(v))).collect();
    polyline(&mut img, &pts, TRACE);
    for p in &pts {
        draw_filled_circle_mut(&mut img, (p.0 as i32, p.1 as i32), 2, TRACE);
    }
    if let Some(b) = loopwatch::metrics::argmin_lower(values) {
        draw_filled_circle_mut(&mut img, (pts[b].0 as i32, pts[b].1 as i32), 4, FLAG);
    }
    save(&img, path)
}
