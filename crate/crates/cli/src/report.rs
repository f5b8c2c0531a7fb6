//! Aggregates run directories into one CSV and an SVG line chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::commands::{metrics_header, METRICS_FILE};
use crate::CliError;

/// One parsed metrics.csv row (mIoU only; per-class columns are carried as text).
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub round: usize,
    pub stage: String,
    pub model: String,
    pub miou: f64,
    pub raw: String,
}

fn schema(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Schema(path.to_path_buf(), msg.into())
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    let path = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(dualmix::Error::from)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != metrics_header() {
        return Err(schema(&path, format!("unexpected header {header:?}")));
    }
    let columns = header.split(',').count();
    let run = run_dir
        .file_name()
        .map_or_else(|| run_dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != columns {
                return Err(schema(&path, format!("row {} has {} columns", i + 2, f.len())));
            }
            let bad = |what: &str| schema(&path, format!("row {}: bad {what}", i + 2));
            Ok(ReportRow {
                run: run.clone(),
                round: f[0].parse().map_err(|_| bad("round"))?,
                stage: f[1].to_owned(),
                model: f[2].to_owned(),
                miou: f[4].parse().map_err(|_| bad("miou"))?,
                raw: line.to_owned(),
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

/// mIoU against round, one polyline per (run, model).
pub fn render_svg(rows: &[ReportRow]) -> String {
    let mut series: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows {
        series.entry((r.run.clone(), r.model.clone())).or_default().push((r.round, r.miou));
    }
    let max_round = rows.iter().map(|r| r.round).max().unwrap_or(1).max(2);
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 60.0, 220.0, 20.0, 50.0);
    let px = |round: usize| left + (round - 1) as f64 / (max_round - 1) as f64 * (w - left - right);
    let py = |miou: f64| top + (1.0 - miou.clamp(0.0, 1.0)) * (h - top - bottom);

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = py(v);
        writeln!(svg, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, w - right).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0).unwrap();
    }
    for round in 1..=max_round {
        let x = px(round);
        writeln!(svg, r#"<text x="{x}" y="{}" text-anchor="middle">{round}</text>"#, h - bottom + 18.0).unwrap();
    }
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#, (left + w - right) / 2.0, h - 10.0).unwrap();
    writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">mIoU</text>"#, h / 2.0, h / 2.0).unwrap();
    for (i, ((run, model), mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|p| p.0);
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|&(r, m)| format!("{:.1},{:.1}", px(r), py(m))).collect();
        writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        for &(r, m) in &pts {
            writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, px(r), py(m)).unwrap();
        }
        let ly = top + 16.0 * i as f64 + 8.0;
        let lx = w - right + 12.0;
        writeln!(svg, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, lx + 18.0).unwrap();
        writeln!(svg, r#"<text x="{}" y="{}">{run} / {model}</text>"#, lx + 24.0, ly + 4.0).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.csv` and `report.svg` into `out`; returns their paths.
pub fn cmd_report(run_dirs: &[PathBuf], out: &Path) -> Result<(PathBuf, PathBuf), CliError> {
    if run_dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        rows.extend(read_metrics(dir)?);
    }
    fs::create_dir_all(out).map_err(dualmix::Error::from)?;
    let mut csv = format!("run,{}\n", metrics_header());
    for r in &rows {
        writeln!(csv, "{},{}", r.run, r.raw).unwrap();
    }
    let csv_path = out.join("report.csv");
    let svg_path = out.join("report.svg");
    fs::write(&csv_path, csv).map_err(dualmix::Error::from)?;
    fs::write(&svg_path, render_svg(&rows)).map_err(dualmix::Error::from)?;
    Ok((csv_path, svg_path))
}
