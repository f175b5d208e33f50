//! Run reports: a static SVG line chart per metric and a table of decoded
//! samples per phase.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{metric_columns, parse_csv, write_csv, MetricsRecord, Phase};

pub const SAMPLE_TABLE: &str = "samples.txt";
pub const SAMPLES_PER_PHASE: usize = 10;
pub const EMPTY_PLACEHOLDER: &str = "<empty>";

const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 50.0;

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svgs: Vec<PathBuf>,
    pub table: PathBuf,
}

/// One polyline; `None` values split it into segments.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, Option<f64>)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a line chart. `marker` draws a dashed vertical line at that x.
pub fn line_chart(title: &str, x_label: &str, series: &[Series], marker: Option<f64>) -> String {
    let defined = || series.iter().flat_map(|s| s.points.iter().filter_map(|&(x, y)| y.map(|y| (x, y))));
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = defined().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (_, y)| (a.min(y), b.max(y)));
    let (x0, x1) = if x0.is_finite() { (x0, if x1 > x0 { x1 } else { x0 + 1.0 }) } else { (0.0, 1.0) };
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    } else if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(svg, r#"<polyline points="{l},{t} {l},{b} {r},{b}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, py(fy) + 4.0, fmt_tick(fy));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(fx), b + 16.0, fmt_tick(fx));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    if let Some(m) = marker {
        let x = px(m);
        let _ = writeln!(svg, r##"<line x1="{x:.1}" y1="{t}" x2="{x:.1}" y2="{b}" stroke="#888" stroke-dasharray="4 3"/>"##);
    }
    if defined().next().is_none() {
        let _ = writeln!(svg, r##"<text x="{}" y="{}" text-anchor="middle" fill="#888">all values nan</text>"##, W / 2.0, H / 2.0);
    }
    for (i, s) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, svg: &mut String| {
            if seg.len() == 1 {
                let mut it = seg[0].split(',');
                let (cx, cy) = (it.next().unwrap_or("0"), it.next().unwrap_or("0"));
                let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="2" fill="{colour}"/>"#);
            } else if seg.len() > 1 {
                let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, seg.join(" "));
            }
            seg.clear();
        };
        for &(x, y) in &s.points {
            match y {
                Some(y) => segment.push(format!("{:.1},{:.1}", px(x), py(y))),
                None => flush(&mut segment, &mut svg),
            }
        }
        flush(&mut segment, &mut svg);
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="10" height="3" fill="{colour}"/>"#, r - 110.0, ly - 4.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}">{}</text>"#, r - 95.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// x position on the combined axis: adversarial iterations follow the last
/// pretraining iteration.
fn global_x(records: &[MetricsRecord]) -> (Vec<f64>, Option<f64>) {
    let offset = records
        .iter()
        .filter(|r| r.phase == Phase::Pretrain)
        .map(|r| r.iteration)
        .max();
    let has_adv = records.iter().any(|r| r.phase == Phase::Adversarial);
    let off = offset.unwrap_or(0) as f64;
    let xs = records
        .iter()
        .map(|r| match r.phase {
            Phase::Pretrain => r.iteration as f64,
            Phase::Adversarial => off + r.iteration as f64,
        })
        .collect();
    (xs, has_adv.then_some(off))
}

fn load_records(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = dir.join(crate::runner::METRICS_FILE);
    if !path.is_file() {
        return Err(Error::Contract(format!("no metrics file at {}", path.display())));
    }
    parse_csv(&fs::read_to_string(path)?)
}

/// Writes the normalised CSV, one `plot_<metric>.svg` per metric column and
/// the sample table into `dir`.
pub fn emit_report(dir: &Path) -> Result<ReportFiles> {
    let records = load_records(dir)?;
    let csv = dir.join(crate::runner::METRICS_FILE);
    fs::write(&csv, write_csv(&records))?;
    let (xs, marker) = global_x(&records);
    let mut svgs = Vec::new();
    for col in metric_columns() {
        let mut series = Vec::new();
        for phase in [Phase::Pretrain, Phase::Adversarial] {
            let points: Vec<(f64, Option<f64>)> = records
                .iter()
                .zip(&xs)
                .filter(|(r, _)| r.phase == phase)
                .map(|(r, &x)| (x, r.column(col)))
                .collect();
            if !points.is_empty() {
                series.push(Series { label: phase.to_string(), points });
            }
        }
        let path = dir.join(format!("plot_{col}.svg"));
        fs::write(&path, line_chart(col, "iteration", &series, marker))?;
        svgs.push(path);
    }
    let table = dir.join(SAMPLE_TABLE);
    fs::write(&table, sample_table(dir)?)?;
    Ok(ReportFiles { csv, svgs, table })
}

/// Ten random samples from the last evaluation of each phase.
fn sample_table(dir: &Path) -> Result<String> {
    let text = fs::read_to_string(dir.join(crate::runner::SAMPLES_FILE)).unwrap_or_default();
    let mut seed = 0u64;
    let mut rows: Vec<(Phase, usize, String)> = Vec::new();
    for line in text.lines() {
        if let Some(s) = line.strip_prefix("# seed=") {
            seed = s.trim().parse().unwrap_or(0);
            continue;
        }
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if let [p, i, _, t] = f[..] {
            if let (Ok(p), Ok(i)) = (p.parse::<Phase>(), i.parse::<usize>()) {
                rows.push((p, i, t.to_string()));
            }
        }
    }
    let mut out = format!("# seed={seed}\n");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for phase in [Phase::Pretrain, Phase::Adversarial] {
        let Some(last) = rows.iter().filter(|r| r.0 == phase).map(|r| r.1).max() else { continue };
        let pool: Vec<&str> = rows
            .iter()
            .filter(|r| r.0 == phase && r.1 == last)
            .map(|r| r.2.as_str())
            .collect();
        let _ = writeln!(out, "== {phase} (iteration {last}) ==");
        let k = SAMPLES_PER_PHASE.min(pool.len());
        let mut picks = sample(&mut rng, pool.len(), k).into_vec();
        picks.sort_unstable();
        for (n, i) in picks.into_iter().enumerate() {
            let t = pool[i].trim();
            let _ = writeln!(out, "{:>2}. {}", n + 1, if t.is_empty() { EMPTY_PLACEHOLDER } else { t });
        }
    }
    Ok(out)
}

/// Paired charts `compare_<metric>.svg`, one line per labelled run directory.
pub fn emit_comparison(runs: &[(String, PathBuf)], out: &Path) -> Result<Vec<PathBuf>> {
    let loaded = runs
        .iter()
        .map(|(label, dir)| Ok((label.clone(), load_records(dir)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut marker = None;
    let mut paths = Vec::new();
    for col in metric_columns() {
        let series: Vec<Series> = loaded
            .iter()
            .map(|(label, recs)| {
                let (xs, m) = global_x(recs);
                marker = marker.or(m);
                Series {
                    label: label.clone(),
                    points: recs.iter().zip(xs).map(|(r, x)| (x, r.column(col))).collect(),
                }
            })
            .collect();
        let path = out.join(format!("compare_{col}.svg"));
        fs::write(&path, line_chart(col, "iteration", &series, marker))?;
        paths.push(path);
    }
    Ok(paths)
}
