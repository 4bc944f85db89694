//! Minimal SVG charts for reports: reliability diagrams, metric-vs-tau
//! sweeps, entropy curves and histograms, optimization trajectories.

use std::fmt::Write;

use crate::metrics::{CalibrationReport, EntropyCurve, EntropyHistogram, Method, SweepRow};

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Axis-aligned plotting frame mapping data ranges to pixels.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    svg: String,
}

impl Frame {
    fn new(title: &str, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let x = if x.1 > x.0 { x } else { (x.0 - 0.5, x.0 + 0.5) };
        let y = if y.1 > y.0 { y } else { (y.0 - 0.5, y.0 + 0.5) };
        let mut svg = String::new();
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>
"#,
            W / 2.0,
            escape(title),
            W / 2.0,
            H - 8.0,
            escape(x_label),
            H / 2.0,
            H / 2.0,
            escape(y_label)
        );
        let mut f = Frame { x, y, svg };
        f.axes();
        f
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }

    fn axes(&mut self) {
        let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
        let _ = writeln!(
            self.svg,
            r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let (px, py) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                self.svg,
                r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                y0 + 14.0,
                tick(xv),
                x0 - 4.0,
                py + 4.0,
                tick(yv)
            );
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let d: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", self.px(x), self.py(y)))
            .collect();
        let dash = if dashed {
            r#" stroke-dasharray="4 3""#
        } else {
            ""
        };
        let _ = writeln!(
            self.svg,
            r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"{dash}/>"#,
            d.join(" ")
        );
        if pts.len() <= 40 {
            for &(x, y) in pts {
                let _ = writeln!(
                    self.svg,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#,
                    self.px(x),
                    self.py(y)
                );
            }
        }
    }

    fn bar(&mut self, lo: f64, hi: f64, height: f64, color: &str, opacity: f64) {
        let (x0, x1) = (self.px(lo), self.px(hi));
        let (top, base) = (self.py(height), self.py(self.y.0));
        let _ = writeln!(
            self.svg,
            r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="{opacity}" stroke="white"/>"#,
            x0,
            (x1 - x0).max(0.0),
            (base - top).max(0.0)
        );
    }

    fn legend(&mut self, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let y = MARGIN + 6.0 + 14.0 * i as f64;
            let x = W - MARGIN - 110.0;
            let _ = writeln!(
                self.svg,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                y - 9.0,
                COLORS[i % COLORS.len()],
                x + 14.0,
                y,
                escape(name)
            );
        }
    }

    fn finish(mut self) -> String {
        self.svg.push_str("</svg>\n");
        self.svg
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let x = range(all().map(|p| p.0));
    let y = range(all().map(|p| p.1));
    let (x, y) = if x.0.is_finite() {
        (x, y)
    } else {
        ((0.0, 1.0), (0.0, 1.0))
    };
    let mut f = Frame::new(title, x_label, y_label, x, (y.0.min(0.0), y.1));
    for (i, s) in series.iter().enumerate() {
        f.polyline(&s.points, COLORS[i % COLORS.len()], false);
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    f.legend(&names);
    f.finish()
}

/// Per-bin empirical frequency against the diagonal of perfect calibration.
pub fn reliability_diagram(title: &str, report: &CalibrationReport) -> String {
    let mut f = Frame::new(
        title,
        "predicted probability",
        "empirical frequency",
        (0.0, 1.0),
        (0.0, 1.0),
    );
    for b in 0..report.bin_count.len() {
        if let Some(acc) = report.bin_accuracy[b] {
            f.bar(
                report.bin_edges[b],
                report.bin_edges[b + 1],
                acc,
                COLORS[0],
                0.7,
            );
        }
    }
    f.polyline(&[(0.0, 0.0), (1.0, 1.0)], "#555555", true);
    let conf: Vec<(f64, f64)> = report
        .bin_confidence
        .iter()
        .zip(&report.bin_accuracy)
        .filter_map(|(c, a)| Some((((*c)?), (*a)?)))
        .collect();
    f.polyline(&conf, COLORS[1], false);
    let _ = writeln!(
        f.svg,
        r#"<text x="{}" y="{}">ECE {:.4}  MCE {:.4}</text>"#,
        MARGIN + 8.0,
        MARGIN + 12.0,
        report.ece,
        report.mce
    );
    f.finish()
}

/// Accuracy against tau, one line per method.
pub fn sweep_chart(rows: &[SweepRow]) -> String {
    let series: Vec<Series> = [Method::Cc, Method::Pb]
        .into_iter()
        .map(|m| Series {
            name: m.name().to_string(),
            points: rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| (r.tau, r.metrics.accuracy))
                .collect(),
        })
        .collect();
    line_chart("accuracy vs threshold", "tau", "accuracy", &series)
}

pub fn entropy_curve_chart(curve: &EntropyCurve) -> String {
    let pts = |rows: &[crate::metrics::FilterRow]| -> Vec<(f64, f64)> {
        rows.iter()
            .filter_map(|r| Some((r.threshold, r.accuracy?)))
            .collect()
    };
    line_chart(
        "accuracy after entropy filtering",
        "normalized entropy threshold",
        "accuracy",
        &[
            Series {
                name: "entropy <= t".into(),
                points: pts(&curve.least_uncertain),
            },
            Series {
                name: "entropy >= t".into(),
                points: pts(&curve.most_uncertain),
            },
        ],
    )
}

/// Overlaid histograms of normalized entropy for correct and incorrect
/// predictions.
pub fn entropy_histogram_chart(hist: &EntropyHistogram) -> String {
    let top = hist
        .correct
        .iter()
        .chain(&hist.incorrect)
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let mut f = Frame::new(
        "normalized entropy",
        "normalized entropy",
        "samples",
        (0.0, 1.0),
        (0.0, top),
    );
    for (i, counts) in [&hist.correct, &hist.incorrect].into_iter().enumerate() {
        for (b, &n) in counts.iter().enumerate() {
            if n > 0 {
                f.bar(hist.edges[b], hist.edges[b + 1], n as f64, COLORS[i], 0.5);
            }
        }
    }
    f.legend(&["correct", "incorrect"]);
    f.finish()
}

pub fn trajectory_chart(objective: &str, trajectory: &[f64]) -> String {
    line_chart(
        "optimization trajectory",
        "step",
        objective,
        &[Series {
            name: objective.to_string(),
            points: trajectory
                .iter()
                .enumerate()
                .map(|(i, &v)| (i as f64, v))
                .collect(),
        }],
    )
}
