//! Standalone SVG line charts for metric columns.

use std::fmt::Write as _;

/// Canvas size and margins in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlotLayout {
    pub width: f64,
    pub height: f64,
    pub margin_left: f64,
    pub margin_right: f64,
    pub margin_top: f64,
    pub margin_bottom: f64,
}

impl Default for PlotLayout {
    fn default() -> Self {
        Self {
            width: 640.0,
            height: 400.0,
            margin_left: 70.0,
            margin_right: 20.0,
            margin_top: 40.0,
            margin_bottom: 50.0,
        }
    }
}

/// Data ranges shown on the axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        let pad = if lo == 0.0 { 0.5 } else { 0.05 * lo.abs() };
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

impl Frame {
    /// Tight bounds around the finite data; a constant axis gets a small pad.
    pub fn fit(x: &[f64], series: &[(String, Vec<f64>)]) -> Self {
        let (x_min, x_max) = padded_range(x.iter().copied());
        let (y_min, y_max) = padded_range(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
        Self {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }
}

impl PlotLayout {
    /// Affine map from data coordinates to pixels; `y` grows downward.
    pub fn to_pixels(&self, frame: &Frame, x: f64, y: f64) -> (f64, f64) {
        let plot_w = self.width - self.margin_left - self.margin_right;
        let plot_h = self.height - self.margin_top - self.margin_bottom;
        let px = self.margin_left + (x - frame.x_min) / (frame.x_max - frame.x_min) * plot_w;
        let py = self.margin_top + (frame.y_max - y) / (frame.y_max - frame.y_min) * plot_h;
        (px, py)
    }
}

const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1e4).round() / 1e4)
    }
}

/// Renders one polyline per series against `x`. Points with a non-finite
/// coordinate break the line.
pub fn line_chart_svg(
    title: &str,
    x_label: &str,
    x: &[f64],
    series: &[(String, Vec<f64>)],
    layout: &PlotLayout,
) -> String {
    let frame = Frame::fit(x, series);
    let l = layout;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="12">"#,
        l.width, l.height, l.width, l.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
        l.width / 2.0,
        l.margin_top / 2.0 + 5.0,
        escape(title)
    );

    let (x0, y0) = l.to_pixels(&frame, frame.x_min, frame.y_min);
    let (x1, y1) = l.to_pixels(&frame, frame.x_max, frame.y_max);
    let _ = writeln!(
        svg,
        r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = frame.x_min + f * (frame.x_max - frame.x_min);
        let yv = frame.y_min + f * (frame.y_max - frame.y_min);
        let (px, _) = l.to_pixels(&frame, xv, frame.y_min);
        let (_, py) = l.to_pixels(&frame, frame.x_min, yv);
        let _ = writeln!(
            svg,
            r#"<line x1="{px}" y1="{y0}" x2="{px}" y2="{}" stroke="black"/><text x="{px}" y="{}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        l.height - 10.0,
        escape(x_label)
    );
    let y_label = series.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ");
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(&y_label)
    );

    for (idx, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for (&xv, &yv) in x.iter().zip(ys) {
            if xv.is_finite() && yv.is_finite() {
                segments.last_mut().expect("nonempty").push(l.to_pixels(&frame, xv, yv));
            } else if !segments.last().expect("nonempty").is_empty() {
                segments.push(Vec::new());
            }
        }
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            let points: Vec<String> = seg.iter().map(|(px, py)| format!("{px},{py}")).collect();
            let _ = writeln!(
                svg,
                r#"<polyline data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                escape(name),
                points.join(" ")
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
            x1 - 5.0,
            y1 + 15.0 + 14.0 * idx as f64,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn polyline_points(svg: &str) -> Vec<Vec<(f64, f64)>> {
        svg.lines()
            .filter(|l| l.starts_with("<polyline"))
            .map(|l| {
                let start = l.find("points=\"").unwrap() + 8;
                let end = start + l[start..].find('"').unwrap();
                l[start..end]
                    .split(' ')
                    .map(|p| {
                        let (a, b) = p.split_once(',').unwrap();
                        (a.parse().unwrap(), b.parse().unwrap())
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn linear_series_endpoints_follow_the_affine_map() {
        // y = 2x + 1 on x in [0, 10]: the frame is [0, 10] x [1, 21]. With the
        // default layout the plot area spans x in [70, 620] and y in [40, 350],
        // so (0, 1) lands at (70, 350) and (10, 21) at (620, 40).
        let x: Vec<f64> = (0..=10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let svg = line_chart_svg("t", "step", &x, &[("y".into(), y)], &PlotLayout::default());
        let lines = polyline_points(&svg);
        assert_eq!(lines.len(), 1);
        let pts = &lines[0];
        assert_eq!(pts.len(), 11);
        assert_eq!(pts[0], (70.0, 350.0));
        assert_eq!(pts[10], (620.0, 40.0));
        assert_eq!(pts[5], (345.0, 195.0));
    }

    #[test]
    fn non_finite_values_split_the_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = vec![0.0, f64::NAN, 1.0, 2.0];
        let svg = line_chart_svg("t", "step", &x, &[("y".into(), y)], &PlotLayout::default());
        let lines = polyline_points(&svg);
        assert_eq!(lines.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn constant_series_is_centered() {
        let svg = line_chart_svg("t", "s", &[0.0, 1.0], &[("c".into(), vec![2.0, 2.0])], &PlotLayout::default());
        let pts = &polyline_points(&svg)[0];
        assert!((pts[0].1 - 195.0).abs() < 1e-9);
    }

    #[test]
    fn labels_are_escaped() {
        let svg = line_chart_svg("a<b", "x&y", &[0.0, 1.0], &[("q\"".into(), vec![0.0, 1.0])], &PlotLayout::default());
        assert!(svg.contains("a&lt;b") && svg.contains("x&amp;y") && svg.contains("q&quot;"));
    }
}
