//! Minimal SVG rendering for trajectories, curves and weight heatmaps.
//! Plots are a convenience; CSV output is the record.

use crate::linalg::Mat;
use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 10] =
    ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data coordinates onto the plotting area.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |a: f64, b: f64| if b - a < 1e-12 { (a - 0.5, b + 0.5) } else { (a - 0.05 * (b - a), b + 0.05 * (b - a)) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = write!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    for i in 0..=4 {
        let u = i as f64 / 4.0;
        let xv = f.x0 + u * (f.x1 - f.x0);
        let yv = f.y0 + u * (f.y1 - f.y0);
        let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(xv), b + 16.0, tick(xv));
        let _ = write!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, f.py(yv) + 4.0, tick(yv));
    }
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = write!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = W - MARGIN - 150.0;
        let _ = write!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, color(i));
        let _ = write!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with one polyline per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = write!(out, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, pts.join(" "), color(i));
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = write!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{}"/>"#, color(i));
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// A scatter point with a color group and an opacity in `[0, 1]`.
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub group: usize,
    pub opacity: f64,
    pub marker: Marker,
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Dot,
    Star,
    Hollow,
}

pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[Point], groups: &[&str]) -> String {
    let f = Frame::fit(points.iter().map(|p| (p.x, p.y)));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, x_label, y_label);
    for p in points.iter().filter(|p| p.x.is_finite() && p.y.is_finite()) {
        let (x, y, c, o) = (f.px(p.x), f.py(p.y), color(p.group), p.opacity.clamp(0.0, 1.0));
        let _ = match p.marker {
            Marker::Dot => write!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{c}" fill-opacity="{o:.3}"/>"#),
            Marker::Hollow => write!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="none" stroke="{c}" stroke-opacity="{o:.3}"/>"#
            ),
            Marker::Star => write!(
                out,
                r#"<path d="M{x:.2} {:.2} L{:.2} {:.2} L{:.2} {:.2} Z" fill="black" fill-opacity="{o:.3}"/>"#,
                y - 7.0,
                x + 6.0,
                y + 5.0,
                x - 6.0,
                y + 5.0
            ),
        };
    }
    legend(&mut out, groups);
    out.push_str("</svg>\n");
    out
}

/// Diverging blue-white-red heatmap of a matrix, scaled to its largest entry.
pub fn heatmap(title: &str, m: &Mat) -> String {
    let (rows, cols) = m.shape();
    let scale = m.max_abs().max(1e-300);
    let cell = ((W - 2.0 * MARGIN) / cols.max(1) as f64).min((H - 2.0 * MARGIN) / rows.max(1) as f64);
    let mut out = String::new();
    header(&mut out, title);
    for i in 0..rows {
        for j in 0..cols {
            let v = (m[(i, j)] / scale).clamp(-1.0, 1.0);
            let (r, g, b) = if v >= 0.0 {
                (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
            } else {
                (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
            };
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({:.0},{:.0},{:.0})"><title>{}</title></rect>"#,
                MARGIN + j as f64 * cell,
                MARGIN + i as f64 * cell,
                r,
                g,
                b,
                m[(i, j)]
            );
        }
    }
    let _ = write!(out, r#"<text x="{MARGIN}" y="{}">max |w| = {}</text>"#, H - 16.0, tick(scale));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_documents() {
        let line = line_chart("a<b", "x", "y", &[Series { name: "s", points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)] }]);
        assert!(line.starts_with("<svg") && line.ends_with("</svg>\n"));
        assert!(line.contains("a&lt;b"));
        let pts = [Point { x: 0.0, y: 0.0, group: 1, opacity: 0.5, marker: Marker::Star }];
        assert!(scatter("t", "x", "y", &pts, &["a", "b"]).contains("<path"));
        let h = heatmap("w", &Mat::identity(3));
        assert_eq!(h.matches("<rect x=").count(), 9);
    }
}
