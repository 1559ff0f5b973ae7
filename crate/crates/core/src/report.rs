//! SVG plots of training logs, each with a tab-separated data sidecar
//! (`<name>.tsv`: `series`, `x`, `y`) holding exactly the plotted points.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::{MetricsRecord, PseudoQualityRecord};

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Internal(format!("plotting failed: {e}"))
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi + (hi - lo) * 0.05) } else { (lo - 0.5, hi + 0.5) };
    (pad(x0, x1), pad(y0.min(0.0), y1))
}

/// Write `<stem>.svg` and `<stem>.tsv` into `dir`; returns the SVG path.
pub fn line_plot(dir: &Path, stem: &str, title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let svg = dir.join(format!("{stem}.svg"));
    let tsv = dir.join(format!("{stem}.tsv"));

    let mut text = String::from("series\tx\ty\n");
    for s in series {
        for (x, y) in &s.points {
            text.push_str(&format!("{}\t{:?}\t{:?}\n", s.name, x, y));
        }
    }
    fs::write(&tsv, text).map_err(|e| Error::io(&tsv, e))?;

    let ((x0, x1), (y0, y1)) = bounds(series);
    {
        let root = SVGBackend::new(&svg, (900, 540)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(42)
            .y_label_area_size(64)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(x_desc)
            .y_desc(y_desc)
            .draw()
            .map_err(plot_err)?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
            let drawn = if pts.len() == 1 {
                chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
            } else {
                chart.draw_series(LineSeries::new(pts, color.stroke_width(2)))
            };
            drawn
                .map_err(plot_err)?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        if !series.is_empty() {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_err)?;
        }
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Parse a sidecar back into series (in first-appearance order).
pub fn read_sidecar(path: &Path) -> Result<Vec<Series>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<Series> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split('\t').collect();
        let bad = || Error::parse(format!("{} line {}", path.display(), i + 1), "expected series<TAB>x<TAB>y");
        if parts.len() != 3 {
            return Err(bad());
        }
        let x: f64 = parts[1].parse().map_err(|_| bad())?;
        let y: f64 = parts[2].parse().map_err(|_| bad())?;
        match out.iter_mut().find(|s| s.name == parts[0]) {
            Some(s) => s.points.push((x, y)),
            None => out.push(Series::new(parts[0], vec![(x, y)])),
        }
    }
    Ok(out)
}

/// One run's logs for reporting.
#[derive(Debug, Clone)]
pub struct RunLogs {
    pub label: String,
    pub metrics: Vec<MetricsRecord>,
    pub pseudo_quality: Vec<PseudoQualityRecord>,
}

fn prefixed(label: &str, name: &str, multi: bool) -> String {
    if multi {
        format!("{label}:{name}")
    } else {
        name.to_string()
    }
}

/// Annotations-per-image, loss-component and pseudo-label-quality plots,
/// overlaid across runs. Returns the SVG paths.
pub fn report_runs(runs: &[RunLogs], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let multi = runs.len() > 1;
    let mut ann = Vec::new();
    let mut loss = Vec::new();
    let mut pq = Vec::new();
    for r in runs {
        let it = |f: fn(&MetricsRecord) -> f64| r.metrics.iter().map(|m| (m.step as f64, f(m))).collect::<Vec<_>>();
        ann.push(Series::new(prefixed(&r.label, "n1", multi), it(|m| m.n1)));
        ann.push(Series::new(prefixed(&r.label, "n2", multi), it(|m| m.n2)));
        loss.push(Series::new(prefixed(&r.label, "loss_total", multi), it(|m| m.loss_total)));
        loss.push(Series::new(prefixed(&r.label, "loss_sup", multi), it(|m| m.loss_sup)));
        loss.push(Series::new(prefixed(&r.label, "loss_unsup", multi), it(|m| m.loss_unsup)));
        pq.push(Series::new(
            prefixed(&r.label, "single", multi),
            r.pseudo_quality.iter().map(|p| (p.step as f64, p.single_ap50)).collect(),
        ));
        let co: Vec<(f64, f64)> = r
            .pseudo_quality
            .iter()
            .filter_map(|p| p.corectify_ap50.map(|v| (p.step as f64, v)))
            .collect();
        if !co.is_empty() {
            pq.push(Series::new(prefixed(&r.label, "co-rectify", multi), co));
        }
    }
    Ok(vec![
        line_plot(out_dir, "annotations_per_image", "Annotations per image", "iteration", "instances / image", &ann)?,
        line_plot(out_dir, "losses", "Loss components", "iteration", "loss", &loss)?,
        line_plot(out_dir, "pseudo_label_map", "Pseudo-label AP50", "iteration", "AP50", &pq)?,
    ])
}

/// Final metric against sweep values.
pub fn sweep_plot(out_dir: &Path, param: &str, values: &[f64], ap50: &[f64]) -> Result<PathBuf> {
    let pts = values.iter().copied().zip(ap50.iter().copied()).collect();
    line_plot(
        out_dir,
        "sweep_summary",
        &format!("AP50 vs {param}"),
        param,
        "AP50",
        &[Series::new("ap50", pts)],
    )
}
