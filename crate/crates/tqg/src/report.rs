//! Run reports: per-variant MAE summaries over seeds and SVG loss curves.

use std::path::{Path, PathBuf};

use crate::osm::{fmt_f64, read_csv, write_csv};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
const METRICS_HEADER: [&str; 4] = ["variant", "seed", "horizon_step", "mae"];

/// One evaluation result. `horizon_step` 0 is the pooled all-steps MAE,
/// steps 1..=T are per-horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    pub horizon_step: usize,
    pub mae: f64,
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.variant, a.seed, a.horizon_step).cmp(&(&b.variant, b.seed, b.horizon_step))
    });
    write_csv(
        path,
        &METRICS_HEADER,
        sorted.into_iter().map(|r| {
            vec![
                r.variant.clone(),
                r.seed.to_string(),
                r.horizon_step.to_string(),
                fmt_f64(r.mae),
            ]
        }),
    )
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (line, record) in read_csv(path, &METRICS_HEADER)? {
        let num = |cell: &str, column: &str| -> Result<f64> {
            cell.parse().map_err(|_| Error::BadNumericCell {
                row: line,
                column: column.into(),
                value: cell.into(),
            })
        };
        rows.push(MetricsRow {
            variant: record[0].clone(),
            seed: num(&record[1], "seed")? as u64,
            horizon_step: num(&record[2], "horizon_step")? as usize,
            mae: num(&record[3], "mae")?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub horizon_step: usize,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub n_seeds: usize,
}

/// Mean ± population std of MAE over seeds, per (variant, horizon step).
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: std::collections::BTreeMap<(String, usize), Vec<f64>> =
        std::collections::BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variant.clone(), r.horizon_step))
            .or_default()
            .push(r.mae);
    }
    groups
        .into_iter()
        .map(|((variant, horizon_step), maes)| {
            let n = maes.len();
            let mean = maes.iter().sum::<f64>() / n as f64;
            let var = maes.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n as f64;
            SummaryRow {
                variant,
                horizon_step,
                mean_mae: mean,
                std_mae: var.sqrt(),
                n_seeds: n,
            }
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["variant", "horizon_step", "mean_mae", "std_mae", "n_seeds"],
        rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.horizon_step.to_string(),
                fmt_f64(r.mean_mae),
                fmt_f64(r.std_mae),
                r.n_seeds.to_string(),
            ]
        }),
    )
}

/// Summarize `metrics.csv` in `run_dir` and render an SVG next to every
/// `*loss*.csv` history file.
pub fn report(run_dir: &Path) -> Result<Vec<SummaryRow>> {
    let metrics_path = run_dir.join(METRICS_FILE);
    if !metrics_path.exists() {
        return Err(Error::MissingRunArtifacts(format!(
            "{} not found",
            metrics_path.display()
        )));
    }
    let rows = read_metrics_csv(&metrics_path)?;
    let summary = summarize(&rows);
    write_summary_csv(&summary, &run_dir.join(SUMMARY_FILE))?;

    for entry in list_loss_files(run_dir)? {
        let history = read_loss_history(&entry)?;
        let svg_path = entry.with_extension("svg");
        let stem = entry
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        render_loss_svg(&history, &stem, &svg_path)?;
    }
    Ok(summary)
}

fn list_loss_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned());
        if let Some(name) = name {
            if name.ends_with(".csv") && name.contains("loss") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

fn read_loss_history(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::new();
    for (line, record) in read_csv(path, &["epoch", "train_loss", "val_loss"])? {
        let num = |cell: &str, column: &str| -> Result<f64> {
            cell.parse().map_err(|_| Error::BadNumericCell {
                row: line,
                column: column.into(),
                value: cell.into(),
            })
        };
        out.push((
            num(&record[0], "epoch")?,
            num(&record[1], "train_loss")?,
            num(&record[2], "val_loss")?,
        ));
    }
    Ok(out)
}

/// Minimal two-polyline chart (train solid, val dashed) with range labels.
fn render_loss_svg(history: &[(f64, f64, f64)], title: &str, path: &Path) -> Result<()> {
    let (w, h) = (640.0, 360.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 30.0, 40.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let xs: Vec<f64> = history.iter().map(|r| r.0).collect();
    let ys: Vec<f64> = history
        .iter()
        .flat_map(|r| [r.1, r.2])
        .filter(|v| v.is_finite())
        .collect();
    let (x_lo, x_hi) = bounds(&xs);
    let (y_lo, y_hi) = bounds(&ys);
    let sx = |x: f64| ml + (x - x_lo) / (x_hi - x_lo).max(1e-12) * plot_w;
    let sy = |y: f64| mt + (1.0 - (y - y_lo) / (y_hi - y_lo).max(1e-12)) * plot_h;

    let polyline = |pick: &dyn Fn(&(f64, f64, f64)) -> f64| -> String {
        history
            .iter()
            .filter(|r| pick(r).is_finite())
            .map(|r| format!("{:.2},{:.2}", sx(r.0), sy(pick(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\" ",
            "font-family=\"sans-serif\">{title}</text>\n",
            "<line x1=\"{ml}\" y1=\"{by}\" x2=\"{rx}\" y2=\"{by}\" stroke=\"black\"/>\n",
            "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{by}\" stroke=\"black\"/>\n",
            "<text x=\"{ml}\" y=\"{lby}\" font-size=\"11\" font-family=\"sans-serif\">{x_lo}</text>\n",
            "<text x=\"{rx}\" y=\"{lby}\" text-anchor=\"end\" font-size=\"11\" ",
            "font-family=\"sans-serif\">{x_hi}</text>\n",
            "<text x=\"{lx}\" y=\"{by}\" text-anchor=\"end\" font-size=\"11\" ",
            "font-family=\"sans-serif\">{y_lo:.4}</text>\n",
            "<text x=\"{lx}\" y=\"{ty}\" text-anchor=\"end\" font-size=\"11\" ",
            "font-family=\"sans-serif\">{y_hi:.4}</text>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{train}\"/>\n",
            "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" ",
            "stroke-dasharray=\"5,3\" points=\"{val}\"/>\n",
            "<text x=\"{rx}\" y=\"{mt}\" text-anchor=\"end\" font-size=\"11\" ",
            "font-family=\"sans-serif\" fill=\"#1f77b4\">train</text>\n",
            "<text x=\"{rx}\" y=\"{vt}\" text-anchor=\"end\" font-size=\"11\" ",
            "font-family=\"sans-serif\" fill=\"#d62728\">val</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        tx = w / 2.0,
        title = title,
        ml = ml,
        mt = mt,
        by = h - mb,
        rx = w - mr,
        lby = h - mb + 16.0,
        lx = ml - 6.0,
        ty = mt + 4.0,
        vt = mt + 14.0,
        x_lo = x_lo,
        x_hi = x_hi,
        y_lo = y_lo,
        y_hi = y_hi,
        train = polyline(&|r| r.1),
        val = polyline(&|r| r.2),
    );
    std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}

fn bounds(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 1.0);
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<MetricsRow> {
        vec![
            MetricsRow { variant: "a".into(), seed: 0, horizon_step: 0, mae: 2.0 },
            MetricsRow { variant: "a".into(), seed: 1, horizon_step: 0, mae: 4.0 },
            MetricsRow { variant: "a".into(), seed: 0, horizon_step: 1, mae: 1.0 },
            MetricsRow { variant: "a".into(), seed: 1, horizon_step: 1, mae: 3.0 },
            MetricsRow { variant: "b".into(), seed: 0, horizon_step: 0, mae: 5.0 },
        ]
    }

    #[test]
    fn single_seed_has_zero_std() {
        let summary = summarize(&rows());
        let b = summary
            .iter()
            .find(|r| r.variant == "b" && r.horizon_step == 0)
            .unwrap();
        assert_eq!(b.n_seeds, 1);
        assert_eq!(b.std_mae, 0.0);
        assert_eq!(b.mean_mae, 5.0);
    }

    #[test]
    fn summary_matches_independent_recomputation() {
        let summary = summarize(&rows());
        let a0 = summary
            .iter()
            .find(|r| r.variant == "a" && r.horizon_step == 0)
            .unwrap();
        // recomputation by hand: mean (2+4)/2 = 3, std sqrt(((2-3)²+(4-3)²)/2) = 1
        assert_eq!(a0.mean_mae, 3.0);
        assert_eq!(a0.std_mae, 1.0);
        assert_eq!(a0.n_seeds, 2);
    }

    #[test]
    fn identical_metric_files_summarize_identically() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("m1.csv"), dir.path().join("m2.csv"));
        write_metrics_csv(&rows(), &p1).unwrap();
        write_metrics_csv(&rows(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let s1 = summarize(&read_metrics_csv(&p1).unwrap());
        let s2 = summarize(&read_metrics_csv(&p2).unwrap());
        assert_eq!(s1, s2);
    }

    #[test]
    fn report_writes_summary_and_svgs() {
        let dir = tempfile::tempdir().unwrap();
        write_metrics_csv(&rows(), &dir.path().join(METRICS_FILE)).unwrap();
        crate::encoder::write_loss_csv(
            &[
                crate::encoder::EpochLoss { epoch: 0, train_loss: 2.0, val_loss: 2.5 },
                crate::encoder::EpochLoss { epoch: 1, train_loss: 1.5, val_loss: 2.0 },
            ],
            &dir.path().join("encoder_loss_0.csv"),
        )
        .unwrap();
        let summary = report(dir.path()).unwrap();
        assert!(!summary.is_empty());
        assert!(dir.path().join(SUMMARY_FILE).exists());
        let svg = std::fs::read_to_string(dir.path().join("encoder_loss_0.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
    }

    #[test]
    fn missing_metrics_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            report(dir.path()),
            Err(Error::MissingRunArtifacts(_))
        ));
    }
}
