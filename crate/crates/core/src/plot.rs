//! Loss-curve and bar-chart images.
//!
//! The bitmap backend is built without a font stack, so images carry no
//! text; the file name names the series and a sidecar CSV holds the values.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::train::{read_metrics, MetricsRow};

pub const SMOOTHING_WINDOW: usize = 101;

const SIZE: (u32, u32) = (800, 400);
const RAW: RGBColor = RGBColor(170, 190, 230);
const SMOOTH: RGBColor = RGBColor(20, 40, 120);

/// Centered moving average over `window` samples. Ends are padded with the
/// first and last values, so the output has the same length as the input.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let n = series.len();
    if n == 0 || window <= 1 {
        return series.to_vec();
    }
    let half = window / 2;
    let at = |i: isize| series[i.clamp(0, n as isize - 1) as usize];
    let mut sum: f64 = (-(half as isize)..=half as isize).map(at).sum();
    let width = (2 * half + 1) as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n as isize {
        out.push(sum / width);
        sum += at(i + half as isize + 1) - at(i - half as isize);
    }
    out
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, format!("plot failed: {e}"))
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-12 + lo.abs() * 1e-6);
    (lo - pad, hi + pad)
}

/// Draws one series as a light raw line with its dark smoothed line on top.
pub fn line_plot(path: &Path, iterations: &[f64], raw: &[f64], window: usize) -> Result<()> {
    if raw.is_empty() || iterations.len() != raw.len() {
        return Err(Error::Invalid(
            "line plot needs equal, non-empty series".into(),
        ));
    }
    let smooth = moving_average(raw, window);
    let x0 = iterations[0];
    let x1 = iterations[iterations.len() - 1].max(x0 + 1.0);
    let (y0, y1) = bounds(raw.iter().copied());
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(10)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    let pts = |ys: &[f64]| {
        iterations
            .iter()
            .copied()
            .zip(ys.iter().copied())
            .collect::<Vec<_>>()
    };
    chart
        .draw_series(LineSeries::new(pts(raw), &RAW))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(pts(&smooth), SMOOTH.stroke_width(2)))
        .map_err(|e| plot_err(path, e))?;
    if y0 < 0.0 && y1 > 0.0 {
        chart
            .draw_series(LineSeries::new([(x0, 0.0), (x1, 0.0)], &BLACK))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Vertical bars, one per value, in order.
pub fn bar_chart(path: &Path, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Invalid("bar chart needs at least one value".into()));
    }
    let (lo, hi) = bounds(values.iter().copied().chain([0.0]));
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(10)
        .build_cartesian_2d(0.0..values.len() as f64, lo..hi)
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, &v)| {
            let v = if v.is_finite() { v } else { 0.0 };
            Rectangle::new(
                [(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v)],
                SMOOTH.filled(),
            )
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

type Column = (&'static str, fn(&MetricsRow) -> f64);

const COLUMNS: [Column; 13] = [
    ("d_s", |r| r.d_s),
    ("d_t", |r| r.d_t),
    ("g_adv_s", |r| r.g_adv_s),
    ("g_adv_t", |r| r.g_adv_t),
    ("g_feature", |r| r.g_feature),
    ("g_l1", |r| r.g_l1),
    ("g_l2", |r| r.g_l2),
    ("g_l2t", |r| r.g_l2t),
    ("g_total", |r| r.g_total),
    ("ds_real", |r| r.ds_real),
    ("ds_fake", |r| r.ds_fake),
    ("dt_real", |r| r.dt_real),
    ("dt_fake", |r| r.dt_fake),
];

/// One image per logged quantity. Columns that stay at zero for the whole
/// run (disabled terms) are skipped. Returns the written paths.
pub fn plot_rows(rows: &[MetricsRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Invalid("metrics contain no rows".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let its: Vec<f64> = rows.iter().map(|r| r.iteration as f64).collect();
    let mut written = Vec::new();
    for (name, get) in COLUMNS {
        let raw: Vec<f64> = rows.iter().map(get).collect();
        if raw.iter().all(|&v| v == 0.0) {
            continue;
        }
        let path = out_dir.join(format!("{name}.png"));
        line_plot(&path, &its, &raw, SMOOTHING_WINDOW)?;
        written.push(path);
    }
    Ok(written)
}

pub fn plot_metrics(metrics: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics(metrics)?;
    if rows.is_empty() {
        return Err(Error::format(metrics, "no metrics rows"));
    }
    plot_rows(&rows, out_dir)
}
