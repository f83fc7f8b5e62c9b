//! Static SVG figures: policy actions over the reward landscape, learning
//! curves with SEM bands, and sweep bar charts.
//!
//! Output depends only on the inputs, so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::envs_data::EnvId;
use crate::error::{Error, Result};
use crate::trainer::mean_sem;

pub const GRID: usize = 200;
const PANEL: f64 = 320.0;
const MARGIN: f64 = 40.0;

/// Dark-to-light palette for the reward contour bins.
const PALETTE: [&str; 8] = [
    "#1b0c41", "#4a0c6b", "#781c6d", "#a52c60", "#cf4446", "#ed6925", "#fb9b06", "#f7d13d",
];
const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub enum PlotKind {
    /// One panel per labelled action file, each over the env's reward contour.
    ScatterOverRewardContour { env: EnvId, panels: Vec<(String, Option<PathBuf>)> },
    /// Mean ± SEM of `metric` per labelled group of metrics files.
    LearningCurve { metric: String, series: Vec<(String, Vec<PathBuf>)> },
    /// `<metric>_mean` with SEM whiskers for each row of a sweep table.
    SweepBars { metric: String, table: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub output: PathBuf,
    pub title: String,
}

/// Plain CSV with a header row. Empty cells and `nan` parse as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header: Vec<String> = match lines.next() {
            Some((_, l)) => l.split(',').map(|c| c.trim().to_string()).collect(),
            None => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: "missing header".into(),
                })
            }
        };
        let mut rows = Vec::new();
        for (i, line) in lines {
            let row: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("expected {} fields, got {}", header.len(), row.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn column_index(&self, name: &str, path: &Path) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("no column `{name}`"),
        })
    }

    /// Numeric column; row `i` of the table is reported as line `i + 2`.
    pub fn numeric(&self, col: usize, path: &Path) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| parse_cell(&r[col], path, i + 2))
            .collect()
    }
}

fn parse_cell(cell: &str, path: &Path, line: usize) -> Result<f64> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    cell.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: format!("`{cell}` is not a number"),
    })
}

/// Action pairs from a CSV whose first two columns are the action coordinates.
pub fn read_actions(path: &Path) -> Result<Vec<[f64; 2]>> {
    let table = CsvTable::read(path)?;
    if table.header.len() < 2 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "need at least two columns".into(),
        });
    }
    let x = table.numeric(0, path)?;
    let y = table.numeric(1, path)?;
    Ok(x.into_iter().zip(y).map(|(x, y)| [x, y]).collect())
}

pub fn plot_extent(env: EnvId) -> (f64, f64) {
    match env {
        EnvId::DangerBandit => (-3.0, 5.5),
        EnvId::MultimodalBandit => (-4.0, 4.0),
        EnvId::TabularChain => (-1.0, 1.0),
    }
}

/// Reward field sampled at cell centers, row 0 at the top (largest y).
pub fn sample_field(env: EnvId) -> Vec<f64> {
    let (lo, hi) = plot_extent(env);
    let field = env.reward_field();
    let step = (hi - lo) / GRID as f64;
    let mut out = Vec::with_capacity(GRID * GRID);
    for r in 0..GRID {
        let y = hi - (r as f64 + 0.5) * step;
        for c in 0..GRID {
            let x = lo + (c as f64 + 0.5) * step;
            out.push(field.evaluate(&[x, y]));
        }
    }
    out
}

/// Bin edges at the 1/8 … 7/8 quantiles of the sampled values.
pub fn quantile_edges(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    (1..PALETTE.len())
        .map(|k| sorted[(k * sorted.len() / PALETTE.len()).min(sorted.len() - 1)])
        .collect()
}

fn bin_of(v: f64, edges: &[f64]) -> usize {
    edges.iter().filter(|e| v > **e).count()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn contour_panel(out: &mut String, env: EnvId, x0: f64, y0: f64, values: &[f64], edges: &[f64]) {
    let cell = PANEL / GRID as f64;
    for r in 0..GRID {
        let mut c = 0;
        while c < GRID {
            let bin = bin_of(values[r * GRID + c], edges);
            let start = c;
            while c < GRID && bin_of(values[r * GRID + c], edges) == bin {
                c += 1;
            }
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x0 + start as f64 * cell,
                y0 + r as f64 * cell,
                (c - start) as f64 * cell,
                cell,
                PALETTE[bin]
            );
        }
    }
    let (lo, hi) = plot_extent(env);
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.2}" y="{y0:.2}" width="{PANEL:.2}" height="{PANEL:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(out, r#"<text x="{x0:.2}" y="{:.2}">{lo}</text>"#, y0 + PANEL + 14.0);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{hi}</text>"#,
        x0 + PANEL,
        y0 + PANEL + 14.0
    );
}

fn to_panel(env: EnvId, a: [f64; 2], x0: f64, y0: f64) -> Option<(f64, f64)> {
    let (lo, hi) = plot_extent(env);
    if !(a[0].is_finite() && a[1].is_finite()) || a[0] < lo || a[0] > hi || a[1] < lo || a[1] > hi {
        return None;
    }
    let s = PANEL / (hi - lo);
    Some((x0 + (a[0] - lo) * s, y0 + (hi - a[1]) * s))
}

fn scatter_svg(env: EnvId, panels: &[(String, Vec<[f64; 2]>)], title: &str) -> String {
    let values = sample_field(env);
    let edges = quantile_edges(&values);
    let count = panels.len().max(1);
    let width = count as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 2.0 * MARGIN + 20.0;
    let mut out = String::new();
    header(&mut out, width, height, title);
    for k in 0..count {
        let x0 = MARGIN + k as f64 * (PANEL + MARGIN);
        let y0 = MARGIN;
        contour_panel(&mut out, env, x0, y0, &values, &edges);
        if let Some((label, points)) = panels.get(k) {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                x0 + PANEL / 2.0,
                y0 - 6.0,
                escape(label)
            );
            for p in points {
                if let Some((x, y)) = to_panel(env, *p, x0, y0) {
                    let _ = writeln!(
                        out,
                        r##"<circle cx="{x:.2}" cy="{y:.2}" r="1.6" fill="#00e5ff" fill-opacity="0.6"/>"##
                    );
                }
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

struct Curve {
    label: String,
    steps: Vec<f64>,
    mean: Vec<f64>,
    sem: Vec<f64>,
}

fn read_curve(label: &str, files: &[PathBuf], metric: &str) -> Result<Curve> {
    let mut per_file: Vec<Vec<(f64, f64)>> = Vec::with_capacity(files.len());
    for path in files {
        let table = CsvTable::read(path)?;
        let sc = table.column_index("step", path)?;
        let mc = table.column_index(metric, path)?;
        let steps = table.numeric(sc, path)?;
        let vals = table.numeric(mc, path)?;
        per_file.push(steps.into_iter().zip(vals).filter(|(_, v)| !v.is_nan()).collect());
    }
    let mut curve = Curve {
        label: label.to_string(),
        steps: Vec::new(),
        mean: Vec::new(),
        sem: Vec::new(),
    };
    let Some(first) = per_file.first() else {
        return Ok(curve);
    };
    // Steps logged by every file.
    for &(step, _) in first {
        let vals: Vec<f64> = per_file
            .iter()
            .filter_map(|f| f.iter().find(|(s, _)| *s == step).map(|(_, v)| *v))
            .collect();
        if vals.len() == per_file.len() {
            let (m, s) = mean_sem(&vals);
            curve.steps.push(step);
            curve.mean.push(m);
            curve.sem.push(s);
        }
    }
    Ok(curve)
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn curve_svg(curves: &[Curve], metric: &str, title: &str) -> String {
    let (w, h) = (2.0 * PANEL, PANEL);
    let (x0, y0) = (MARGIN * 1.5, MARGIN);
    let mut out = String::new();
    header(&mut out, w + 3.0 * MARGIN, h + 2.5 * MARGIN, title);
    let (xl, xh) = axis_range(curves.iter().flat_map(|c| c.steps.iter().cloned()));
    let (yl, yh) = axis_range(curves.iter().flat_map(|c| {
        c.mean
            .iter()
            .zip(&c.sem)
            .flat_map(|(m, s)| [m - s, m + s])
            .collect::<Vec<_>>()
    }));
    let px = |x: f64| x0 + (x - xl) / (xh - xl) * w;
    let py = |y: f64| y0 + (yh - y) / (yh - yl) * h;
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#, x0 + w / 2.0, y0 + h + 28.0);
    let _ = writeln!(out, r#"<text x="8" y="{:.2}">{}</text>"#, y0 - 8.0, escape(metric));
    let _ = writeln!(out, r#"<text x="{x0:.2}" y="{:.2}">{xl:.0}</text>"#, y0 + h + 14.0);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{xh:.0}</text>"#, x0 + w, y0 + h + 14.0);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yh:.3}</text>"#, x0 - 4.0, y0 + 10.0);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yl:.3}</text>"#, x0 - 4.0, y0 + h);
    for (k, c) in curves.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        if c.steps.is_empty() {
            continue;
        }
        let mut band = String::new();
        for i in 0..c.steps.len() {
            let _ = write!(band, "{:.2},{:.2} ", px(c.steps[i]), py(c.mean[i] + c.sem[i]));
        }
        for i in (0..c.steps.len()).rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(c.steps[i]), py(c.mean[i] - c.sem[i]));
        }
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.trim_end()
        );
        let line: Vec<String> = (0..c.steps.len())
            .map(|i| format!("{:.2},{:.2}", px(c.steps[i]), py(c.mean[i])))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{}</text>"#,
            x0 + w + 6.0,
            y0 + 14.0 * (k as f64 + 1.0),
            escape(&c.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn bars_svg(labels: &[String], means: &[f64], sems: &[f64], metric: &str, title: &str) -> String {
    let (w, h) = (2.0 * PANEL, PANEL);
    let (x0, y0) = (MARGIN * 1.5, MARGIN);
    let mut out = String::new();
    header(&mut out, w + 2.0 * MARGIN, h + 2.5 * MARGIN, title);
    let (mut yl, yh) = axis_range(
        means
            .iter()
            .zip(sems)
            .flat_map(|(m, s)| [m - s, m + s])
            .chain(std::iter::once(0.0)),
    );
    yl = yl.min(0.0);
    let py = |y: f64| y0 + (yh - y) / (yh - yl) * h;
    let _ = writeln!(
        out,
        r#"<rect x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(out, r#"<text x="8" y="{:.2}">{}</text>"#, y0 - 8.0, escape(metric));
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yh:.3}</text>"#, x0 - 4.0, y0 + 10.0);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yl:.3}</text>"#, x0 - 4.0, y0 + h);
    let slot = w / labels.len().max(1) as f64;
    for (i, label) in labels.iter().enumerate() {
        let cx = x0 + slot * (i as f64 + 0.5);
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        if means[i].is_finite() {
            let (top, bottom) = (py(means[i].max(0.0)), py(means[i].min(0.0)));
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                cx - slot * 0.3,
                slot * 0.6,
                bottom - top
            );
            if sems[i].is_finite() {
                let _ = writeln!(
                    out,
                    r#"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#,
                    py(means[i] + sems[i]),
                    py(means[i] - sems[i])
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            y0 + h + 14.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Render `spec` to SVG text without touching the output path.
pub fn render(spec: &PlotSpec) -> Result<String> {
    match &spec.kind {
        PlotKind::ScatterOverRewardContour { env, panels } => {
            let mut loaded = Vec::with_capacity(panels.len());
            for (label, path) in panels {
                let points = match path {
                    Some(p) => read_actions(p)?,
                    None => Vec::new(),
                };
                loaded.push((label.clone(), points));
            }
            Ok(scatter_svg(*env, &loaded, &spec.title))
        }
        PlotKind::LearningCurve { metric, series } => {
            let curves = series
                .iter()
                .map(|(label, files)| read_curve(label, files, metric))
                .collect::<Result<Vec<_>>>()?;
            Ok(curve_svg(&curves, metric, &spec.title))
        }
        PlotKind::SweepBars { metric, table } => {
            let t = CsvTable::read(table)?;
            let lc = t.column_index("label", table)?;
            let mc = t.column_index(&format!("{metric}_mean"), table)?;
            let sc = t.column_index(&format!("{metric}_sem"), table)?;
            let labels: Vec<String> = t.rows.iter().map(|r| r[lc].clone()).collect();
            Ok(bars_svg(&labels, &t.numeric(mc, table)?, &t.numeric(sc, table)?, metric, &spec.title))
        }
    }
}

pub fn emit_plot(spec: &PlotSpec) -> Result<()> {
    let svg = render(spec)?;
    if let Some(parent) = spec.output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&spec.output, svg)?;
    Ok(())
}
