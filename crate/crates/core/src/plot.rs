//! Minimal SVG line charts.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Ticks on a 1/2/5 grid with labels printed at the grid's precision.
fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<(f64, String)> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step + 1e-9).floor() as i64;
    (first..=last)
        .map(|k| {
            let t = k as f64 * step;
            let label = format!("{t:.decimals$}");
            (label.parse().unwrap_or(t), label)
        })
        .collect()
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            series: Vec::new(),
        }
    }

    pub fn log_x(mut self, on: bool) -> Self {
        self.log_x = on;
        self
    }

    pub fn push(&mut self, label: &str, points: Vec<(f64, f64)>) {
        self.series.push(Series {
            label: label.into(),
            points,
        });
    }

    pub fn to_svg(&self) -> Result<String> {
        if self.series.is_empty() || self.series.iter().all(|s| s.points.is_empty()) {
            return Err(Error::invalid("chart has no data"));
        }
        let pts = self.series.iter().flat_map(|s| &s.points);
        if pts.clone().any(|&(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::invalid("chart data must be finite"));
        }
        if self.log_x && pts.clone().any(|&(x, _)| x <= 0.0) {
            return Err(Error::invalid("log-scale x needs positive values"));
        }
        let fx = |x: f64| if self.log_x { x.log10() } else { x };
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in pts {
            x0 = x0.min(fx(x));
            x1 = x1.max(fx(x));
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if self.log_x {
            x0 = x0.floor();
            x1 = x1.ceil().max(x0 + 1.0);
        } else if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            let pad = (y0.abs() * 0.05).max(0.5);
            y0 -= pad;
            y1 += pad;
        }
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (fx(x) - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let scale = if self.log_x { "log" } else { "linear" };
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" data-x-scale="{scale}">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r##"<g class="axes" stroke="#333"><line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{0}"/></g>"##,
            TOP + ph,
            LEFT + pw
        );
        if self.log_x {
            for d in (x0 as i64)..=(x1 as i64) {
                let px = LEFT + (d as f64 - x0) / (x1 - x0) * pw;
                let _ = writeln!(
                    s,
                    r##"<g class="tick-x" data-value="1e{d}"><line x1="{px:.2}" y1="{0}" x2="{px:.2}" y2="{1}" stroke="#333"/><text x="{px:.2}" y="{2}" text-anchor="middle" font-size="11">1e{d}</text></g>"##,
                    TOP + ph,
                    TOP + ph + 5.0,
                    TOP + ph + 18.0
                );
            }
        } else {
            for (t, label) in nice_ticks(x0, x1, 6) {
                let px = sx(t);
                let _ = writeln!(
                    s,
                    r##"<g class="tick-x" data-value="{label}"><line x1="{px:.2}" y1="{0}" x2="{px:.2}" y2="{1}" stroke="#333"/><text x="{px:.2}" y="{2}" text-anchor="middle" font-size="11">{label}</text></g>"##,
                    TOP + ph,
                    TOP + ph + 5.0,
                    TOP + ph + 18.0
                );
            }
        }
        for (t, label) in nice_ticks(y0, y1, 6) {
            let py = sy(t);
            let _ = writeln!(
                s,
                r##"<g class="tick-y" data-value="{label}"><line x1="{0}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="#333"/><text x="{1}" y="{2:.2}" text-anchor="end" font-size="11">{label}</text></g>"##,
                LEFT - 5.0,
                LEFT - 8.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
            LEFT + pw / 2.0,
            H - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{0}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {0})">{1}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let d: Vec<String> = series
                .points
                .iter()
                .enumerate()
                .map(|(j, &(x, y))| {
                    format!(
                        "{}{:.2},{:.2}",
                        if j == 0 { 'M' } else { 'L' },
                        sx(x),
                        sy(y)
                    )
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<path class="series" data-label="{}" d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                escape(&series.label),
                d.join(" ")
            );
            let ly = TOP + 10.0 + 20.0 * i as f64;
            let lx = W - RIGHT + 15.0;
            let _ = writeln!(
                s,
                r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{0}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{1}" y="{2}" font-size="12">{3}</text></g>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.label)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}
