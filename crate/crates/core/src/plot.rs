//! Self-contained SVG rendering of an embedding with optional magnification
//! background and geodesic polylines.

use std::fmt::Write;

use nalgebra::DMatrix;

use crate::geometry::{Geodesic, MetricGrid};

const SIZE: f64 = 600.0;
const MARGIN: f64 = 20.0;
const LOW: [f64; 3] = [247.0, 251.0, 255.0];
const HIGH: [f64; 3] = [8.0, 48.0, 107.0];

/// Linear interpolation between a light and a dark blue, `t ∈ [0, 1]`.
fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let c: Vec<u8> = (0..3).map(|k| (LOW[k] + (HIGH[k] - LOW[k]) * t).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn hue(k: usize) -> &'static str {
    const PALETTE: [&str; 8] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
    PALETTE[k % PALETTE.len()]
}

/// What to draw.
#[derive(Default)]
pub struct Scene<'a> {
    /// `N×q`; the first two columns are drawn.
    pub embedding: Option<&'a DMatrix<f64>>,
    /// One integer label per point; colours cycle through a fixed palette.
    pub labels: Option<&'a [i64]>,
    pub grid: Option<&'a MetricGrid>,
    pub geodesics: &'a [Geodesic],
}

/// Renders `scene` on a fixed 600×600 viewport fitted to the data bounds.
pub fn render_svg(scene: &Scene<'_>) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    if let Some(z) = scene.embedding {
        for i in 0..z.nrows() {
            xs.push(z[(i, 0)]);
            ys.push(if z.ncols() > 1 { z[(i, 1)] } else { 0.0 });
        }
    }
    if let Some(g) = scene.grid {
        for &(lo, hi) in g.bounds.iter().take(1) {
            xs.extend([lo, hi]);
        }
        for &(lo, hi) in g.bounds.iter().skip(1).take(1) {
            ys.extend([lo, hi]);
        }
    }
    for geo in scene.geodesics {
        for p in &geo.points {
            xs.push(p[0]);
            ys.push(p.get(1).copied().unwrap_or(0.0));
        }
    }
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) }
    };
    let (x0, x1) = range(&xs);
    let (y0, y1) = range(&ys);
    let span = SIZE - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * span;
    let py = |y: f64| SIZE - MARGIN - (y - y0) / (y1 - y0) * span;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(
        s,
        "<!-- background: magnification factor, linear map from min (#f7fbff) to max (#08306b) over the grid values -->"
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    if let Some(g) = scene.grid.filter(|g| g.bounds.len() == 2) {
        let lo = g.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let res = g.resolution;
        let dx = (g.bounds[0].1 - g.bounds[0].0) / (res - 1) as f64;
        let dy = (g.bounds[1].1 - g.bounds[1].0) / (res - 1) as f64;
        for (p, v) in g.points.iter().zip(&g.values) {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let (l, r) = (px(p[0] - dx / 2.0), px(p[0] + dx / 2.0));
            let (top, bottom) = (py(p[1] + dy / 2.0), py(p[1] - dy / 2.0));
            let _ = writeln!(
                s,
                r#"<rect x="{l:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                (r - l).abs(),
                (bottom - top).abs(),
                ramp(t)
            );
        }
    }
    for geo in scene.geodesics {
        let pts: Vec<String> =
            geo.points.iter().map(|p| format!("{:.2},{:.2}", px(p[0]), py(p.get(1).copied().unwrap_or(0.0)))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#, pts.join(" "));
    }
    if let Some(z) = scene.embedding {
        for i in 0..z.nrows() {
            let y = if z.ncols() > 1 { z[(i, 1)] } else { 0.0 };
            let fill = match scene.labels {
                Some(l) => hue(l[i].rem_euclid(8) as usize),
                None => "#333333",
            };
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{fill}"/>"#, px(z[(i, 0)]), py(y));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_points() {
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let svg = render_svg(&Scene { embedding: Some(&z), ..Default::default() });
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(ramp(0.0), "#f7fbff");
        assert_eq!(ramp(1.0), "#08306b");
    }
}
