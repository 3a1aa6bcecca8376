//! Deterministic SVG line charts over the CSV artifacts of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
/// Longer series are thinned to at most this many points.
const MAX_POINTS: usize = 1000;

/// One named polyline; `None` values break the line.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Draw a marker at every point.
    pub markers: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { lo.abs() * 0.1 } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

impl LineChart {
    /// Number of drawn (non-null) points in each series.
    pub fn point_counts(&self) -> Vec<usize> {
        self.series
            .iter()
            .map(|s| s.points.iter().filter(|(_, y)| y.is_some()).count())
            .collect()
    }

    pub fn to_svg(&self) -> String {
        let (x0, x1) = bounds(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y0, y1) = bounds(self.series.iter().flat_map(|s| s.points.iter().filter_map(|p| p.1)));
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(
                s,
                r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##,
                MARGIN_TOP,
                MARGIN_TOP + plot_h
            );
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##,
                MARGIN_LEFT,
                MARGIN_LEFT + plot_w
            );
            let _ = writeln!(
                s,
                r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                MARGIN_TOP + plot_h + 16.0,
                tick_label(xv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 6.0,
                py + 4.0,
                tick_label(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        );

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut segment: Vec<String> = Vec::new();
            let flush = |segment: &mut Vec<String>, s: &mut String| {
                if segment.len() > 1 {
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                        segment.join(" ")
                    );
                }
                segment.clear();
            };
            for &(x, y) in &series.points {
                match y {
                    Some(y) => {
                        segment.push(format!("{:.2},{:.2}", sx(x), sy(y)));
                        if self.markers {
                            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
                        }
                    }
                    None => flush(&mut segment, &mut s),
                }
            }
            flush(&mut segment, &mut s);
            let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
            let lx = MARGIN_LEFT + plot_w + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#,
                ly - 4.0,
                lx + 18.0,
                ly - 4.0
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 24.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

/// A parsed CSV file: header plus string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Table> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| anyhow!("missing header"))?
            .split(',')
            .map(String::from)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                let cells: Vec<String> = l.split(',').map(String::from).collect();
                if cells.len() != header.len() {
                    bail!("row {} has {} cells, expected {}", i + 2, cells.len(), header.len());
                }
                Ok(cells)
            })
            .collect::<Result<_>>()?;
        Ok(Table { header, rows })
    }

    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Table::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Cells of `name` as optional numbers (empty cells are `None`).
    pub fn numbers(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column(name).ok_or_else(|| anyhow!("missing column {name}"))?;
        self.rows
            .iter()
            .map(|r| {
                let cell = &r[c];
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse().map(Some).map_err(|_| anyhow!("bad number {cell:?} in column {name}"))
                }
            })
            .collect()
    }
}

fn thin(points: Vec<(f64, Option<f64>)>) -> Vec<(f64, Option<f64>)> {
    if points.len() <= MAX_POINTS {
        return points;
    }
    let stride = points.len().div_ceil(MAX_POINTS);
    let last = points.len() - 1;
    points
        .into_iter()
        .enumerate()
        .filter(|(i, _)| i % stride == 0 || *i == last)
        .map(|(_, p)| p)
        .collect()
}

/// Final mode-excess against the sweep value, one series per estimator.
pub fn sweep_chart(summary: &Table) -> Result<Option<LineChart>> {
    let (Some(est), Some(axis), Some(value)) = (
        summary.column("estimator"),
        summary.column("axis"),
        summary.column("value"),
    ) else {
        return Ok(None);
    };
    let metric = summary.numbers("final_mode_excess")?;
    let axis_name = summary.rows.first().map(|r| r[axis].clone()).unwrap_or_default();
    let numeric: Option<Vec<f64>> = summary.rows.iter().map(|r| r[value].parse::<f64>().ok()).collect();
    let mut series: Vec<Series> = Vec::new();
    for (i, row) in summary.rows.iter().enumerate() {
        let key = if numeric.is_some() { row[est].clone() } else { "final_mode_excess".to_string() };
        let x = match &numeric {
            Some(xs) => xs[i],
            None => i as f64,
        };
        match series.iter_mut().find(|s| s.name == key) {
            Some(s) => s.points.push((x, metric[i])),
            None => series.push(Series {
                name: key,
                points: vec![(x, metric[i])],
            }),
        }
    }
    let x_label = if numeric.is_some() { axis_name.clone() } else { "run index".to_string() };
    Ok(Some(LineChart {
        title: format!("final mode-excess vs {axis_name}"),
        x_label,
        y_label: "final mode-excess".into(),
        series,
        markers: true,
    }))
}

/// Per-term cosine with the total update, against the step.
pub fn cosine_chart(id: &str, trace: &Table) -> Result<LineChart> {
    let steps = trace.numbers("step")?;
    let series = ["cos_recon", "cos_cls", "cos_inv"]
        .iter()
        .map(|name| {
            let ys = trace.numbers(name)?;
            let points = steps.iter().zip(ys).map(|(x, y)| (x.unwrap_or(0.0), y)).collect();
            Ok(Series {
                name: name.to_string(),
                points: thin(points),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LineChart {
        title: format!("{id}: term cosines"),
        x_label: "step".into(),
        y_label: "cosine with total".into(),
        series,
        markers: false,
    })
}

/// Mode excess against the step.
pub fn excess_chart(id: &str, trace: &Table) -> Result<LineChart> {
    let steps = trace.numbers("step")?;
    let ys = trace.numbers("metric_mode_excess")?;
    let points = steps.iter().zip(ys).map(|(x, y)| (x.unwrap_or(0.0), y)).collect();
    Ok(LineChart {
        title: format!("{id}: mode excess"),
        x_label: "step".into(),
        y_label: "mode excess".into(),
        series: vec![Series {
            name: "mode_excess".into(),
            points: thin(points),
        }],
        markers: false,
    })
}

/// Distance to the clean point, one series per restore run.
pub fn restore_chart(runs: &[(String, Table)]) -> Result<LineChart> {
    let series = runs
        .iter()
        .map(|(id, t)| {
            let steps = t.numbers("step")?;
            let d = t.numbers("distance")?;
            let points = steps.iter().zip(d).map(|(x, y)| (x.unwrap_or(0.0), y)).collect();
            Ok(Series {
                name: id.clone(),
                points: thin(points),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LineChart {
        title: "noise and restore".into(),
        x_label: "step".into(),
        y_label: "distance to clean point".into(),
        series,
        markers: false,
    })
}

fn run_files(runs: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>> {
    if !runs.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(runs).with_context(|| format!("reading {}", runs.display()))? {
        let path = entry?.path();
        if let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(suffix)) {
            out.push((id.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Build every chart for `dir` and write them; nothing is written unless
/// all inputs parse and are non-empty. Returns the written paths.
pub fn write_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let summary_path = dir.join("summary.csv");
    if !summary_path.is_file() {
        bail!("{} has no summary.csv", dir.display());
    }
    let summary = Table::read(&summary_path)?;
    let runs = dir.join("runs");

    let mut charts: Vec<(PathBuf, String)> = Vec::new();
    if let Some(chart) = sweep_chart(&summary)? {
        if !summary.rows.is_empty() {
            charts.push((dir.join("summary.svg"), chart.to_svg()));
        }
    }
    for (id, path) in run_files(&runs, ".trace.csv")? {
        let trace = Table::read(&path)?;
        if trace.rows.is_empty() {
            bail!("trace {} is empty", path.display());
        }
        charts.push((runs.join(format!("{id}.cosine.svg")), cosine_chart(&id, &trace)?.to_svg()));
        charts.push((runs.join(format!("{id}.excess.svg")), excess_chart(&id, &trace)?.to_svg()));
    }
    let mut restores = Vec::new();
    for (id, path) in run_files(&runs, ".restore.csv")? {
        let t = Table::read(&path)?;
        if t.rows.is_empty() {
            bail!("restore trajectory {} is empty", path.display());
        }
        restores.push((id, t));
    }
    if !restores.is_empty() {
        charts.push((dir.join("restore.svg"), restore_chart(&restores)?.to_svg()));
    }

    for (path, svg) in &charts {
        fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(charts.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_values_break_polylines() {
        let chart = LineChart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                name: "a".into(),
                points: vec![(0.0, Some(1.0)), (1.0, Some(2.0)), (2.0, None), (3.0, Some(1.0)), (4.0, Some(0.0))],
            }],
            markers: false,
        };
        assert_eq!(chart.to_svg().matches("<polyline").count(), 2);
        assert_eq!(chart.point_counts(), vec![4]);
    }

    #[test]
    fn svg_is_deterministic() {
        let chart = LineChart {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                name: "s".into(),
                points: (0..10).map(|i| (i as f64, Some((i * i) as f64))).collect(),
            }],
            markers: true,
        };
        assert_eq!(chart.to_svg(), chart.to_svg());
        assert!(chart.to_svg().contains("a &lt; b"));
    }

    #[test]
    fn sweep_chart_groups_by_estimator() {
        let t = Table::parse(
            "run,estimator,axis,value,final_mode_excess\n\
             a,sds,guidance,2.5,1\nb,sds,guidance,7.5,2\nc,isd,guidance,2.5,0.5\n",
        )
        .unwrap();
        let chart = sweep_chart(&t).unwrap().unwrap();
        assert_eq!(chart.point_counts(), vec![2, 1]);
    }

    #[test]
    fn thinning_keeps_the_last_point() {
        let pts: Vec<_> = (0..5000).map(|i| (i as f64, Some(0.0))).collect();
        let thinned = thin(pts);
        assert!(thinned.len() <= MAX_POINTS + 1);
        assert_eq!(thinned.last().unwrap().0, 4999.0);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(Table::parse("a,b\n1\n").is_err());
    }
}
