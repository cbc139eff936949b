//! Static SVG line charts rendered from the result CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::records::{require_columns, write_atomic};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 160.0, 40.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// CSV layouts the plotter understands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvKind {
    Sweep,
    CostCurves,
    CrossoverCosts,
    DynRange,
    TrainingLog,
}

impl CsvKind {
    const ALL: [CsvKind; 5] = [
        CsvKind::Sweep,
        CsvKind::CostCurves,
        CsvKind::CrossoverCosts,
        CsvKind::DynRange,
        CsvKind::TrainingLog,
    ];

    fn columns(self) -> &'static [&'static str] {
        match self {
            CsvKind::Sweep => &["method", "K", "mse_mean", "cost_global_total", "cost_local_total", "Q"],
            CsvKind::CostCurves => &["method", "K", "cost_total", "cost_per_estimate", "mse_mean", "csi"],
            CsvKind::CrossoverCosts => &["method", "csi", "K", "T", "cost_per_estimate"],
            CsvKind::DynRange => &["epoch", "batch_statistic_best", "trainable_best"],
            CsvKind::TrainingLog => &["epoch", "train_loss", "validation_loss", "learning_rate"],
        }
    }

    /// The layout sharing the most columns with `headers`.
    pub fn detect(headers: &csv::StringRecord) -> CsvKind {
        let score = |k: &CsvKind| {
            let cols = k.columns();
            let hits = cols.iter().filter(|c| headers.iter().any(|h| h == **c)).count();
            (hits * 1000 / cols.len(), hits)
        };
        *Self::ALL.iter().max_by_key(|k| score(k)).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
struct Chart {
    title: String,
    x_label: String,
    y_label: String,
    log_y: bool,
    series: Vec<Series>,
}

fn number(row: &csv::StringRecord, idx: usize, col: &str, path: &Path) -> Result<Option<f64>> {
    let raw = row.get(idx).unwrap_or("");
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse().map(Some).map_err(|_| {
        Error::Schema(format!(
            "{}: column `{col}` holds `{raw}`, not a number",
            path.display()
        ))
    })
}

/// Groups `(x, y)` points by the value of `group` (or one series per y column).
fn grouped(
    path: &Path,
    headers: &csv::StringRecord,
    rows: &[csv::StringRecord],
    group: &str,
    x: &str,
    y: &str,
) -> Result<Vec<Series>> {
    let col = |c: &str| headers.iter().position(|h| h == c).unwrap();
    let (g, xi, yi) = (col(group), col(x), col(y));
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let name = r.get(g).unwrap_or("").to_string();
        if let (Some(a), Some(b)) = (number(r, xi, x, path)?, number(r, yi, y, path)?) {
            if !by.contains_key(&name) {
                order.push(name.clone());
            }
            by.entry(name).or_default().push((a, b));
        }
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let mut points = by.remove(&name).unwrap();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect())
}

fn columns_as_series(
    path: &Path,
    headers: &csv::StringRecord,
    rows: &[csv::StringRecord],
    x: &str,
    ys: &[&str],
) -> Result<Vec<Series>> {
    let col = |c: &str| headers.iter().position(|h| h == c).unwrap();
    ys.iter()
        .map(|y| {
            let mut points = Vec::new();
            for r in rows {
                if let (Some(a), Some(b)) = (number(r, col(x), x, path)?, number(r, col(y), y, path)?) {
                    points.push((a, b));
                }
            }
            Ok(Series {
                name: y.to_string(),
                points,
            })
        })
        .collect()
}

fn chart_for(path: &Path) -> Result<Chart> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let kind = CsvKind::detect(&headers);
    require_columns(&headers, kind.columns(), &path.display().to_string())?;
    let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
    let title = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    let chart = |x_label: &str, y_label: &str, log_y, series| Chart {
        title: title.clone(),
        x_label: x_label.into(),
        y_label: y_label.into(),
        log_y,
        series,
    };
    Ok(match kind {
        CsvKind::Sweep => chart(
            "K",
            "MSE",
            true,
            grouped(path, &headers, &rows, "method", "K", "mse_mean")?,
        ),
        CsvKind::CostCurves => chart(
            "communication cost per agent",
            "MSE",
            true,
            grouped(path, &headers, &rows, "method", "cost_total", "mse_mean")?,
        ),
        CsvKind::CrossoverCosts => chart(
            "coherence interval T",
            "cost per estimate",
            false,
            grouped(path, &headers, &rows, "method", "T", "cost_per_estimate")?,
        ),
        CsvKind::DynRange => chart(
            "epoch",
            "best validation loss",
            true,
            columns_as_series(
                path,
                &headers,
                &rows,
                "epoch",
                &["batch_statistic_best", "trainable_best"],
            )?,
        ),
        CsvKind::TrainingLog => chart(
            "epoch",
            "loss",
            true,
            columns_as_series(path, &headers, &rows, "epoch", &["train_loss", "validation_loss"])?,
        ),
    })
}

/// Round numbers covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64, log: bool) -> Vec<f64> {
    if log {
        let (a, b) = (lo.log10().floor() as i32, hi.log10().ceil() as i32);
        return (a..=b).map(|e| 10f64.powi(e)).collect();
    }
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).floor() as i64;
    let end = (hi / step).ceil() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.log10().round() as i32)
    } else if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(chart: &Chart) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (WIDTH - ml - mr, HEIGHT - mt - mb);
    let pts = chart
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| !chart.log_y || p.1 > 0.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.1, 1.0);
    }
    let yt = ticks(y0, y1, chart.log_y);
    let xt = ticks(x0, x1, false);
    let (x0, x1) = (xt[0].min(x0), xt.last().unwrap().max(x1));
    let (y0, y1) = (yt[0].min(y0), yt.last().unwrap().max(y1));
    let tx = |x: f64| ml + if x1 > x0 { (x - x0) / (x1 - x0) * pw } else { pw / 2.0 };
    let ty = |y: f64| {
        let (a, b, v) = if chart.log_y {
            (y0.log10(), y1.log10(), y.log10())
        } else {
            (y0, y1, y)
        };
        mt + ph - if b > a { (v - a) / (b - a) * ph } else { ph / 2.0 }
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        ml + pw / 2.0,
        escape(&chart.title)
    );
    for &v in &yt {
        let y = ty(v);
        let _ = writeln!(
            s,
            r##"<line x1="{ml:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            ml + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            ml - 6.0,
            y + 4.0,
            fmt_tick(v, chart.log_y)
        );
    }
    for &v in &xt {
        let x = tx(v);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.1}" y1="{mt:.1}" x2="{x:.1}" y2="{:.1}" stroke="#eeeeee"/>"##,
            mt + ph
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            mt + ph + 18.0,
            fmt_tick(v, false)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{ml:.1}" y="{mt:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        HEIGHT - 10.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        escape(&chart.y_label)
    );
    for (i, series) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = series
            .points
            .iter()
            .filter(|p| !chart.log_y || p.1 > 0.0)
            .map(|&(x, y)| format!("{:.1},{:.1}", tx(x), ty(y)))
            .collect();
        let _ = writeln!(s, r#"<g class="series" data-name="{}">"#, escape(&series.name));
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        let _ = writeln!(s, "</g>");
        let ly = mt + 12.0 + 18.0 * i as f64;
        let lx = ml + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Renders one SVG per CSV into `out`, named after the CSV.
pub fn cmd_plot(csvs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for path in csvs {
        let chart = chart_for(path)?;
        let target = out.join(format!("{}.svg", chart.title));
        write_atomic(&target, render(&chart).as_bytes())?;
        written.push(target);
    }
    Ok(written)
}
