use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Bin, ReliabilityDiagram};
use crate::error::{Error, Result};

const CSV_HEADER: &str = "bin_lo,bin_hi,count,conf,acc";

fn to_csv(d: &ReliabilityDiagram) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for b in &d.bins {
        writeln!(out, "{},{},{},{},{}", b.lo, b.hi, b.count, b.conf, b.acc).expect("write to string");
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn export_reliability(d: &ReliabilityDiagram, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let svg = dir.join(format!("{stem}.svg"));
    fs::write(&csv, to_csv(d)).map_err(|e| Error::io(&csv, e))?;
    fs::write(&svg, render_reliability_svg(d, stem)).map_err(|e| Error::io(&svg, e))?;
    Ok((csv, svg))
}

pub fn read_reliability_csv(path: &Path) -> Result<ReliabilityDiagram> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format(path, "missing reliability header"));
    }
    let mut bins = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(path, format!("malformed row {}: `{line}`", i + 2));
        if cols.len() != 5 {
            return Err(bad());
        }
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        bins.push(Bin {
            lo: f(cols[0])?,
            hi: f(cols[1])?,
            count: cols[2].parse().map_err(|_| bad())?,
            conf: f(cols[3])?,
            acc: f(cols[4])?,
        });
    }
    let n = bins.iter().map(|b| b.count).sum();
    Ok(ReliabilityDiagram { bins, n })
}

/// Bar chart of per-bin accuracy with the confidence gap outlined and the
/// diagonal of perfect calibration.
pub fn render_reliability_svg(d: &ReliabilityDiagram, title: &str) -> String {
    let (size, margin) = (360.0, 40.0);
    let plot = size - 2.0 * margin;
    let x = |v: f64| margin + v * plot;
    let y = |v: f64| size - margin - v * plot;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>"#);
    for b in &d.bins {
        let w = x(b.hi) - x(b.lo);
        if b.count > 0 {
            let _ = writeln!(
                s,
                r##"<rect class="acc" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#4a78c2" stroke="#1d3f73"/>"##,
                x(b.lo),
                y(b.acc),
                w,
                y(0.0) - y(b.acc)
            );
            let (top, bottom) = if b.conf > b.acc {
                (b.conf, b.acc)
            } else {
                (b.acc, b.conf)
            };
            let _ = writeln!(
                s,
                r##"<rect class="gap" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#e06666" fill-opacity="0.35" stroke="#b03030"/>"##,
                x(b.lo),
                y(top),
                w,
                y(bottom) - y(top)
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<line class="diagonal" x1="{}" y1="{}" x2="{}" y2="{}" stroke="#555" stroke-dasharray="4 3"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="none" stroke="black"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">confidence</text>"#,
        size / 2.0,
        size - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">accuracy</text>"#,
        size / 2.0,
        size / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="13" text-anchor="middle">{} (ECE {:.4})</text>"#,
        size / 2.0,
        xml_escape(title),
        d.ece()
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::compute_ece;

    #[test]
    fn csv_round_trip_is_exact() {
        let conf = [0.13, 0.27, 0.55, 0.61, 0.93, 0.99, 0.999, 0.31];
        let ok = [true, false, true, true, false, true, true, false];
        let (_, d) = compute_ece(&conf, &ok, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv, svg) = export_reliability(&d, dir.path(), "rel").unwrap();
        assert_eq!(read_reliability_csv(&csv).unwrap(), d);
        assert!(fs::read_to_string(svg).unwrap().contains("diagonal"));
    }

    #[test]
    fn empty_bins_are_zero_rows() {
        let (_, d) = compute_ece(&[0.95], &[true], 10).unwrap();
        let csv = to_csv(&d);
        assert!(csv.lines().nth(1).unwrap().ends_with(",0,0,0"));
    }

    #[test]
    fn perfect_calibration_bars_touch_diagonal() {
        // acc == conf per bin: the gap rectangles collapse to zero height.
        let (ece, d) = compute_ece(&[1.0, 1.0], &[true, true], 10).unwrap();
        assert_eq!(ece, 0.0);
        let svg = render_reliability_svg(&d, "perfect");
        assert!(svg.contains(r#"class="gap""#));
        assert!(svg.contains(r#"height="0.000""#));
    }

    #[test]
    fn unwritable_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, "x").unwrap();
        let (_, d) = compute_ece(&[0.5], &[true], 2).unwrap();
        assert!(export_reliability(&d, &file, "rel").is_err());
    }
}
