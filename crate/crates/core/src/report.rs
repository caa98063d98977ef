//! Plots and a text summary for a run or sweep directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use crate::error::{AirError, Result};
use crate::evalbench::{CellRecord, SweepTrace};
use crate::experiment::{read_results_csv, run_id, ConfigRecord, ResultRow, RunTrace};

fn corrupt(path: &Path, reason: impl ToString) -> AirError {
    AirError::Corrupt { path: path.to_path_buf(), reason: reason.to_string() }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => corrupt(path, "missing"),
        _ => AirError::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| corrupt(path, e))
}

fn same_hash(expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(AirError::HashMismatch { expected: expected.into(), found: found.into() })
    }
}

/// A line series; `None` entries are gaps.
struct Series<'a> {
    name: &'a str,
    points: Vec<(f64, f64)>,
    connect: bool,
}

const W: f64 = 560.0;
const H: f64 = 360.0;
const PAD: f64 = 56.0;

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Minimal SVG chart. Every input point becomes one `<circle class="point">`.
fn svg_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>], bars: bool) -> String {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.05;
        y1 += 0.05;
    }
    if bars {
        y0 = y0.min(0.0);
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, xml(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, sx(fx), H - PAD + 16.0, fmt_tick(fx));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#, PAD - 6.0, sy(fy) + 4.0, fmt_tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 14.0, xml(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = colors[k % colors.len()];
        if bars {
            let width = ((W - 2.0 * PAD) / (ser.points.len().max(1) as f64 * 1.6)).min(40.0);
            for &(x, y) in &ser.points {
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{width:.1}" height="{:.1}" fill="{color}" opacity="0.6"/>"#,
                    sx(x) - width / 2.0,
                    sy(y),
                    sy(y0) - sy(y)
                );
            }
        } else if ser.connect && ser.points.len() > 1 {
            let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle class="point" cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 150.0,
            PAD - 8.0 + 14.0 * k as f64,
            xml(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// What `report_dir` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub config_hash: String,
    pub kind: String,
    pub rows: usize,
    /// Points drawn in the accuracy plot.
    pub plotted_points: usize,
    pub files: Vec<PathBuf>,
}

fn write(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| AirError::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn check_pseudolabels(path: &Path, hash: &str) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    for (n, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| corrupt(path, format!("line {}: {e}", n + 1)))?;
        let found = v.get("config_hash").and_then(|h| h.as_str()).ok_or_else(|| corrupt(path, format!("line {} has no config_hash", n + 1)))?;
        same_hash(hash, found)?;
    }
    Ok(())
}

/// Validates the artifacts in `dir` (all must carry one config hash) and
/// writes `report/` with SVG plots and summary.txt.
pub fn report_dir(dir: &Path) -> Result<ReportSummary> {
    if !dir.is_dir() {
        return Err(AirError::Config(format!("{} is not a directory", dir.display())));
    }
    let config: ConfigRecord = read_json(&dir.join("config.json"))?;
    let hash = config.config_hash.clone();
    let trace_path = dir.join("trace.json");
    let trace: serde_json::Value = read_json(&trace_path)?;
    let found = trace.get("config_hash").and_then(|h| h.as_str()).ok_or_else(|| corrupt(&trace_path, "no config_hash"))?;
    same_hash(&hash, found)?;
    let kind = trace.get("kind").and_then(|k| k.as_str()).unwrap_or("").to_string();

    let csv_path = dir.join("results.csv");
    let rows: Vec<ResultRow> = if csv_path.exists() { read_results_csv(&csv_path)? } else { Vec::new() };
    let prefix = run_id(&hash);
    for r in &rows {
        if !r.run_id.is_empty() && !r.run_id.starts_with(&prefix) {
            return Err(AirError::HashMismatch { expected: prefix.clone(), found: r.run_id.clone() });
        }
    }

    let out_dir = dir.join("report");
    fs::create_dir_all(&out_dir).map_err(|e| AirError::io(&out_dir, e))?;
    let mut files = Vec::new();
    let mut summary = String::new();
    let _ = writeln!(summary, "config_hash: {hash}");
    let _ = writeln!(summary, "kind: {kind}");
    let _ = writeln!(summary, "rows: {}", rows.len());
    let plotted_points;

    match kind.as_str() {
        "run" => {
            let run: RunTrace = serde_json::from_value(trace).map_err(|e| corrupt(&trace_path, e))?;
            check_pseudolabels(&dir.join("pseudolabels.jsonl"), &hash)?;
            let pl: Vec<(f64, f64)> = run
                .records
                .iter()
                .filter_map(|r| r.pseudo_label_accuracy.map(|a| (r.iteration as f64, a)))
                .collect();
            let top: Vec<(f64, f64)> = run
                .records
                .iter()
                .filter_map(|r| r.pseudo_top50_acc.map(|a| (r.iteration as f64, a)))
                .collect();
            let test: Vec<(f64, f64)> = run
                .records
                .iter()
                .filter_map(|r| r.test.as_ref().map(|m| (r.iteration as f64, m.accuracy)))
                .collect();
            plotted_points = test.len();
            let svg = svg_chart(
                "Pseudo-label accuracy by iteration",
                "iteration",
                "accuracy",
                &[Series { name: "trained-on labels", points: pl, connect: false }],
                true,
            );
            write(out_dir.join("pseudo_label_accuracy.svg"), &svg, &mut files)?;
            let svg = svg_chart(
                "Accuracy by iteration",
                "iteration",
                "accuracy",
                &[
                    Series { name: "test", points: test, connect: true },
                    Series { name: "top-50 pseudo-labels", points: top, connect: true },
                ],
                false,
            );
            write(out_dir.join("accuracy_by_iteration.svg"), &svg, &mut files)?;
            let _ = writeln!(summary, "\niteration  pseudo_acc  top50_acc  test_acc  harmonic_mean");
            for r in &run.records {
                let m = r.test.as_ref();
                let _ = writeln!(
                    summary,
                    "{:>9}  {:>10}  {:>9}  {:>8}  {:>13}",
                    r.iteration,
                    opt(r.pseudo_label_accuracy),
                    opt(r.pseudo_top50_acc),
                    opt(m.map(|m| m.accuracy)),
                    opt(m.and_then(|m| m.harmonic_mean))
                );
            }
        }
        "sweep" => {
            let sweep: SweepTrace = serde_json::from_value(trace).map_err(|e| corrupt(&trace_path, e))?;
            let cells_dir = dir.join("cells");
            if let Ok(entries) = fs::read_dir(&cells_dir) {
                let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
                paths.sort();
                for p in paths.iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
                    let rec: CellRecord = read_json(p)?;
                    same_hash(&hash, &rec.sweep_hash)?;
                }
            }
            let param = sweep.parameter.as_str();
            let points: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.value?, r.accuracy?))).collect();
            plotted_points = points.len();
            let means = group_means(&rows, |r| r.accuracy);
            let svg = svg_chart(
                &format!("Test accuracy vs {param}"),
                param,
                "accuracy",
                &[
                    Series { name: "per seed", points, connect: false },
                    Series { name: "mean", points: means.iter().map(|m| (m.0, m.1)).collect(), connect: true },
                ],
                false,
            );
            write(out_dir.join(format!("accuracy_vs_{param}.svg")), &svg, &mut files)?;
            let top: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.value?, r.pseudo_top50_acc?))).collect();
            let svg = svg_chart(
                &format!("Top-50 pseudo-label accuracy vs {param}"),
                param,
                "accuracy",
                &[Series { name: "per seed", points: top, connect: false }],
                false,
            );
            write(out_dir.join(format!("pseudo_top50_vs_{param}.svg")), &svg, &mut files)?;
            let _ = writeln!(summary, "parameter: {param}");
            let _ = writeln!(summary, "failed cells: {}", sweep.failures.len());
            let _ = writeln!(summary, "\n{param:>14}  seeds  mean_acc  mean_top50");
            let top_means = group_means(&rows, |r| r.pseudo_top50_acc);
            for (v, acc, n) in &means {
                let t = top_means.iter().find(|m| m.0 == *v).map(|m| m.1);
                let _ = writeln!(summary, "{:>14}  {n:>5}  {acc:>8.4}  {:>10}", fmt_tick(*v), opt(t));
            }
        }
        other => return Err(corrupt(&trace_path, format!("unknown trace kind {other:?}"))),
    }

    let _ = writeln!(summary, "\nrun_id                             value  seed  accuracy  top50");
    for r in &rows {
        let _ = writeln!(
            summary,
            "{:<33}  {:>5}  {:>4}  {:>8}  {:>6}",
            r.run_id,
            r.value.map_or_else(|| "-".into(), fmt_tick),
            r.seed,
            opt(r.accuracy),
            opt(r.pseudo_top50_acc)
        );
    }
    write(out_dir.join("summary.txt"), &summary, &mut files)?;
    Ok(ReportSummary { config_hash: hash, kind, rows: rows.len(), plotted_points, files })
}

/// (value, mean, count) of `metric` per distinct value, in first-seen order.
fn group_means(rows: &[ResultRow], metric: impl Fn(&ResultRow) -> Option<f64>) -> Vec<(f64, f64, usize)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        let (Some(v), Some(m)) = (r.value, metric(r)) else { continue };
        match out.iter_mut().find(|g| g.0 == v) {
            Some(g) => {
                g.1 += m;
                g.2 += 1;
            }
            None => out.push((v, m, 1)),
        }
    }
    for g in &mut out {
        g.1 /= g.2 as f64;
    }
    out
}
