//! Markdown report, per-trajectory projection tables and line-plot images
//! regenerated from the evaluation and training artifacts.

use std::io::BufRead;
use std::path::{Path, PathBuf};

use super::commands::Layout;
use super::eval::TrajectoryDetail;
use crate::error::{Error, Result};
use crate::metrics::{read_metrics_csv, MetricRow};
use crate::synthworld::pgm::write_pgm;

pub const PLOT_WIDTH: usize = 128;
pub const PLOT_HEIGHT: usize = 64;
const MARGIN: usize = 3;

/// Dark polyline of `ys` (evenly spaced in x) on a light background,
/// autoscaled to the canvas. Returns row-major pixel values in `[0,1]`.
pub fn line_plot(ys: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut px = vec![1.0; width * height];
    let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || width <= 2 * MARGIN || height <= 2 * MARGIN {
        return px;
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = ((width - 2 * MARGIN - 1) as f64, (height - 2 * MARGIN - 1) as f64);
    let point = |i: usize, y: f64| -> (i64, i64) {
        let fx = if ys.len() > 1 { i as f64 / (ys.len() - 1) as f64 } else { 0.5 };
        let fy = (y - lo) / span;
        ((MARGIN as f64 + fx * w).round() as i64, (MARGIN as f64 + (1.0 - fy) * h).round() as i64)
    };
    let mut plot = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            px[y as usize * width + x as usize] = 0.0;
        }
    };
    let pts: Vec<(i64, i64)> = ys
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(i, &y)| point(i, y))
        .collect();
    if pts.len() == 1 {
        plot(pts[0].0, pts[0].1);
    }
    for seg in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = y0 + (y1 - y0) * s / steps;
            plot(x, y);
        }
    }
    px
}

fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|e| Error::io(path, e))?,
        None => return Ok(Vec::new()),
    };
    let idx = header
        .split(',')
        .position(|h| h == column)
        .ok_or_else(|| Error::format(path, format!("no column `{column}`")))?;
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if let Some(v) = line.split(',').nth(idx) {
            out.push(v.parse().map_err(|e| Error::format(path, format!("bad value `{v}`: {e}")))?);
        }
    }
    Ok(out)
}

fn read_trajectories(path: &Path) -> Result<Vec<TrajectoryDetail>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Files written by [`cmd_report`], relative to the report directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportSummary {
    pub rows: usize,
    pub files: Vec<PathBuf>,
}

/// Regenerates `report/` from `eval/metrics.csv`, `eval/trajectories.jsonl`
/// and the training histories. Missing inputs are skipped with a warning.
pub fn cmd_report(layout: &Layout) -> Result<ReportSummary> {
    let dir = layout.report();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut summary = ReportSummary::default();
    let mut md = String::from("# Evaluation report\n\n");

    let metrics_path = layout.metrics_csv();
    let rows: Vec<MetricRow> = if metrics_path.exists() {
        read_metrics_csv(&metrics_path)?
    } else {
        Vec::new()
    };
    summary.rows = rows.len();
    if rows.is_empty() {
        log::warn!("no metrics at {}; writing an empty report", metrics_path.display());
        md.push_str("No metrics available.\n");
    } else {
        md.push_str("## Metrics\n\n| metric | value | levels | config |\n|---|---|---|---|\n");
        for r in &rows {
            let levels = r.levels.map_or(String::from("-"), |l| l.to_string());
            md.push_str(&format!("| {} | {} | {levels} | {} |\n", r.metric, r.display(), r.config));
        }
        md.push('\n');
    }

    let traj_path = layout.eval().join("trajectories.jsonl");
    if traj_path.exists() {
        let trajectories = read_trajectories(&traj_path)?;
        if !trajectories.is_empty() {
            md.push_str("## Intensity trajectories\n\n| emotion | levels | spearman | FLIE | oracle FLIE | projection plot |\n|---|---|---|---|---|---|\n");
        }
        for t in &trajectories {
            let stem = format!("projection_{}_{}", t.label, t.levels);
            let mut csv = String::from("level,k,projection,oracle_projection\n");
            for (i, ((k, p), o)) in t.intensities.iter().zip(&t.projections).zip(&t.oracle_projections).enumerate() {
                csv.push_str(&format!("{i},{k},{p:e},{o:e}\n"));
            }
            write_text(&dir.join(format!("{stem}.csv")), &csv)?;
            write_pgm(&dir.join(format!("{stem}.pgm")), &line_plot(&t.projections, PLOT_WIDTH, PLOT_HEIGHT), PLOT_WIDTH, PLOT_HEIGHT)?;
            summary.files.push(PathBuf::from(format!("{stem}.csv")));
            summary.files.push(PathBuf::from(format!("{stem}.pgm")));
            md.push_str(&format!(
                "| {} | {} | {:.3} | {:.4} | {:.2e} | {stem}.pgm |\n",
                t.label, t.levels, t.spearman, t.flie, t.flie_oracle
            ));
        }
        md.push('\n');
    }

    let curves = [
        (layout.diffusion().join("history.csv"), "loss_final", "loss_diffusion"),
        (layout.exprgen().join("history.csv"), "loss_g", "loss_exprgen_g"),
        (layout.exprgen().join("history.csv"), "loss_d", "loss_exprgen_d"),
    ];
    let mut any_curve = false;
    for (path, column, stem) in curves {
        if !path.exists() {
            continue;
        }
        let ys = read_column(&path, column)?;
        if ys.is_empty() {
            continue;
        }
        if !any_curve {
            md.push_str("## Loss curves\n\n");
            any_curve = true;
        }
        write_pgm(&dir.join(format!("{stem}.pgm")), &line_plot(&ys, PLOT_WIDTH, PLOT_HEIGHT), PLOT_WIDTH, PLOT_HEIGHT)?;
        summary.files.push(PathBuf::from(format!("{stem}.pgm")));
        let last = ys.last().copied().unwrap_or(f64::NAN);
        md.push_str(&format!("- {stem}.pgm: {} steps, final {column} {last:.4}\n", ys.len()));
    }

    write_text(&dir.join("report.md"), &md)?;
    summary.files.push(PathBuf::from("report.md"));
    Ok(summary)
}
