//! Aggregation of finished runs into an alpha-sweep table and plots.
//!
//! The report reads only `summary.csv` and `eval/*/reliability.csv` files,
//! so regenerating it from the same runs yields the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::commands::RunSummary;
use crate::calibration::{read_reliability_csv, render_reliability_svg};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMean {
    pub alpha: f64,
    pub runs: usize,
    pub source_target_miou: f64,
    pub source_target_ece: f64,
    /// Mean over the runs that adapted; absent when none did.
    pub adapted_target: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub means: Vec<AlphaMean>,
}

/// `root` itself when it holds a summary, otherwise its immediate
/// subdirectories that do, sorted by name.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("summary.csv").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut runs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("summary.csv").is_file() {
            runs.push(path);
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(Error::Empty(format!("no completed runs under {}", root.display())));
    }
    Ok(runs)
}

fn run_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn build_report(runs: &[PathBuf]) -> Result<Report> {
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let path = dir.join("summary.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        rows.push(ReportRow {
            run: run_name(dir),
            summary: RunSummary::from_csv(&text, &path)?,
        });
    }
    let mut alphas: Vec<f64> = rows.iter().map(|r| r.summary.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let means = alphas
        .into_iter()
        .map(|alpha| {
            let group: Vec<&RunSummary> = rows.iter().map(|r| &r.summary).filter(|s| s.alpha == alpha).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let adapted: Vec<(f64, f64)> = group.iter().filter_map(|s| s.adapted_target).collect();
            AlphaMean {
                alpha,
                runs: group.len(),
                source_target_miou: mean(&group.iter().map(|s| s.source_target.0).collect::<Vec<_>>()),
                source_target_ece: mean(&group.iter().map(|s| s.source_target.1).collect::<Vec<_>>()),
                adapted_target: (!adapted.is_empty()).then(|| {
                    (
                        mean(&adapted.iter().map(|a| a.0).collect::<Vec<_>>()),
                        mean(&adapted.iter().map(|a| a.1).collect::<Vec<_>>()),
                    )
                }),
            }
        })
        .collect();
    Ok(Report { rows, means })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "run,seed,alpha,source_epoch,source_target_miou,source_target_ece,adapted_target_miou,adapted_target_ece\n",
        );
        for r in &self.rows {
            let m = &r.summary;
            let (am, ae) = m
                .adapted_target
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{am},{ae}",
                r.run, m.seed, m.alpha, m.source_epoch, m.source_target.0, m.source_target.1
            );
        }
        for a in &self.means {
            let (am, ae) = a
                .adapted_target
                .map(|(x, y)| (x.to_string(), y.to_string()))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "mean,,{},,{},{},{am},{ae}",
                a.alpha, a.source_target_miou, a.source_target_ece
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| run | seed | alpha | source mIoU (target) | source ECE (target) | adapted mIoU | adapted ECE |\n\
             |---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let m = &r.summary;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.4} | {:.4} | {} | {} |",
                r.run,
                m.seed,
                m.alpha,
                m.source_target.0,
                m.source_target.1,
                opt(m.adapted_target.map(|a| a.0)),
                opt(m.adapted_target.map(|a| a.1))
            );
        }
        for a in &self.means {
            let _ = writeln!(
                s,
                "| mean of {} | | {} | {:.4} | {:.4} | {} | {} |",
                a.runs,
                a.alpha,
                a.source_target_miou,
                a.source_target_ece,
                opt(a.adapted_target.map(|x| x.0)),
                opt(a.adapted_target.map(|x| x.1))
            );
        }
        s
    }

    /// Grouped bars of per-alpha mean target mIoU and ECE for the source
    /// model, with the adapted mIoU where available.
    pub fn sweep_svg(&self) -> String {
        let (w, h, margin) = (420.0, 280.0, 40.0);
        let plot_h = h - 2.0 * margin;
        let group_w = (w - 2.0 * margin) / self.means.len().max(1) as f64;
        let bar_w = group_w / 4.0;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <line x1=\"{margin}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <text x=\"{margin}\" y=\"20\">target mIoU (blue: source, green: adapted) and ECE (red) by alpha</text>\n",
            y0 = h - margin,
            x1 = w - margin
        );
        let colors = ["#3b6ea8", "#4e9a4e", "#c0504d"];
        for (i, a) in self.means.iter().enumerate() {
            let values = [
                Some(a.source_target_miou),
                a.adapted_target.map(|x| x.0),
                Some(a.source_target_ece),
            ];
            let gx = margin + i as f64 * group_w + bar_w / 2.0;
            for (k, v) in values.iter().enumerate() {
                if let Some(v) = v {
                    let bh = v.clamp(0.0, 1.0) * plot_h;
                    let _ = writeln!(
                        s,
                        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                        gx + k as f64 * bar_w,
                        h - margin - bh,
                        bar_w * 0.9,
                        bh,
                        colors[k]
                    );
                }
            }
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\">alpha = {}</text>",
                gx,
                h - margin + 16.0,
                a.alpha
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Aggregates the runs under `root` into `out`: `report.csv`, `report.md`,
/// `alpha_sweep.svg`, and one reliability diagram per evaluation found.
pub fn cmd_report(root: &Path, out: &Path) -> Result<Report> {
    let runs = find_runs(root)?;
    let report = build_report(&runs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let put = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    put("report.csv", report.to_csv())?;
    put("report.md", report.to_markdown())?;
    put("alpha_sweep.svg", report.sweep_svg())?;
    for dir in &runs {
        let eval = dir.join("eval");
        let Ok(entries) = fs::read_dir(&eval) else { continue };
        let mut evals: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
        evals.sort();
        for e in evals {
            let csv = e.join("reliability.csv");
            if !csv.is_file() {
                continue;
            }
            let title = format!("{} {}", run_name(dir), run_name(&e));
            let diagram = read_reliability_csv(&csv)?;
            put(
                &format!("reliability_{}_{}.svg", run_name(dir), run_name(&e)),
                render_reliability_svg(&diagram, &title),
            )?;
        }
    }
    Ok(report)
}
