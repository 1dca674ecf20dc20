//! Minimal SVG renderings of result tables: scatter plots, box summaries and
//! heat grids. The CSV next to each SVG is the authoritative output.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        Self { lo, hi, log }
    }

    /// Position in [0, 1], or `None` for values that cannot be drawn.
    fn unit(&self, v: f64) -> Option<f64> {
        let v = if self.log {
            if v <= 0.0 {
                return None;
            }
            v.log10()
        } else {
            v
        };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn label(&self, t: f64) -> String {
        let v = self.lo + t * (self.hi - self.lo);
        if self.log {
            format!("1e{v:.1}")
        } else {
            format!("{v:.3e}")
        }
    }
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str, x: Option<&Axis>, y: &Axis) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - 20.0, 40.0);
    let _ = write!(out, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 15.0, esc(xlabel));
    let _ = write!(
        out,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(ylabel)
    );
    for t in [0.0, 0.5, 1.0] {
        let py = y0 - t * (y0 - y1);
        let _ = write!(out, r#"<text x="{}" y="{py}" text-anchor="end">{}</text>"#, x0 - 4.0, y.label(t));
        if let Some(x) = x {
            let px = x0 + t * (x1 - x0);
            let _ = write!(out, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, y0 + 14.0, x.label(t));
        }
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    (MARGIN + x * (W - 20.0 - MARGIN), H - MARGIN - y * (H - MARGIN - 40.0))
}

pub fn scatter(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)], log_x: bool, log_y: bool) -> String {
    let x = Axis::fit(points.iter().map(|p| p.0), log_x);
    let y = Axis::fit(points.iter().map(|p| p.1), log_y);
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel, Some(&x), &y);
    for &(a, b) in points {
        if let (Some(u), Some(v)) = (x.unit(a), y.unit(b)) {
            let (px, py) = to_px(u, v);
            let _ = write!(out, r#"<circle cx="{px:.1}" cy="{py:.1}" r="2" fill="steelblue" fill-opacity="0.6"/>"#);
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One box (quartiles, whiskers at the 5th/95th percentiles) per group.
pub fn box_summary(title: &str, ylabel: &str, groups: &[(String, Vec<f64>)], log_y: bool) -> String {
    let y = Axis::fit(groups.iter().flat_map(|g| g.1.iter().copied()), log_y);
    let mut out = String::new();
    frame(&mut out, title, "", ylabel, None, &y);
    let n = groups.len().max(1) as f64;
    for (i, (name, values)) in groups.iter().enumerate() {
        let q = |p| rpf_core::stats::quantile(values, p);
        let cx = (i as f64 + 0.5) / n;
        let (px, _) = to_px(cx, 0.0);
        let half = 0.3 * (W - 20.0 - MARGIN) / n;
        let py = |v: f64| y.unit(v).map(|u| to_px(cx, u).1);
        if let (Some(p05), Some(p25), Some(p50), Some(p75), Some(p95)) =
            (py(q(0.05)), py(q(0.25)), py(q(0.5)), py(q(0.75)), py(q(0.95)))
        {
            let _ = write!(out, r#"<line x1="{px:.1}" x2="{px:.1}" y1="{p05:.1}" y2="{p95:.1}" stroke="black"/>"#);
            let _ = write!(
                out,
                r#"<rect x="{:.1}" y="{p75:.1}" width="{:.1}" height="{:.1}" fill="lightsteelblue" stroke="black"/>"#,
                px - half,
                2.0 * half,
                (p25 - p75).max(0.5)
            );
            let _ = write!(
                out,
                r#"<line x1="{:.1}" x2="{:.1}" y1="{p50:.1}" y2="{p50:.1}" stroke="black" stroke-width="2"/>"#,
                px - half,
                px + half
            );
        }
        let _ = write!(out, r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#, H - MARGIN + 14.0, esc(name));
    }
    out.push_str("</svg>\n");
    out
}

/// Row-major `n × n` grid of values (missing cells blank) with optional markers.
pub fn heat_grid(title: &str, xlabel: &str, ylabel: &str, n: usize, values: &[Option<f64>], markers: &[(usize, usize, &str)]) -> String {
    let v = Axis::fit(values.iter().flatten().copied(), false);
    let y = Axis { lo: 0.0, hi: n as f64, log: false };
    let mut out = String::new();
    frame(&mut out, title, xlabel, ylabel, None, &y);
    let cw = (W - 20.0 - MARGIN) / n.max(1) as f64;
    let ch = (H - MARGIN - 40.0) / n.max(1) as f64;
    for (k, val) in values.iter().enumerate() {
        let (i, j) = (k / n, k % n);
        let Some(t) = val.and_then(|x| v.unit(x)) else { continue };
        let shade = (255.0 * (1.0 - t.clamp(0.0, 1.0))) as u8;
        let (px, py) = (MARGIN + i as f64 * cw, H - MARGIN - (j + 1) as f64 * ch);
        let _ = write!(
            out,
            r#"<rect x="{px:.1}" y="{py:.1}" width="{:.1}" height="{:.1}" fill="rgb({shade},{shade},255)"/>"#,
            cw + 0.2,
            ch + 0.2
        );
    }
    for &(i, j, color) in markers {
        let (px, py) = (MARGIN + (i as f64 + 0.5) * cw, H - MARGIN - (j as f64 + 0.5) * ch);
        let _ = write!(out, r#"<circle cx="{px:.1}" cy="{py:.1}" r="5" fill="none" stroke="{color}" stroke-width="2"/>"#);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_well_formed_and_skip_undrawable_points() {
        let s = scatter("t", "x", "y", &[(1.0, 1e-3), (2.0, 0.0), (3.0, 1e-1)], false, true);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<circle").count(), 2);

        let b = box_summary("t", "y", &[("a".into(), vec![1.0, 2.0, 3.0]), ("b&c".into(), vec![])], false);
        assert!(b.contains("b&amp;c"));
        assert_eq!(b.matches("lightsteelblue").count(), 1);

        let g = heat_grid("t", "x", "y", 2, &[Some(1.0), None, Some(2.0), Some(3.0)], &[(1, 1, "red")]);
        assert_eq!(g.matches("rgb(").count(), 3);
        assert!(g.contains(r#"stroke="red""#));
    }
}
