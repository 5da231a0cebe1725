//! Minimal deterministic SVG plot emission: a scatter with an optional
//! regression line, and grouped boxplots. Pure string builders, so the
//! files are byte-identical across reruns.

use std::fmt::Write as FmtWrite;
use std::path::Path;

use crate::error::{IguaneError, Result};
use crate::stats::percentile;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Maps data range [lo, hi] onto pixel range [a, b].
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn new(values: impl Iterator<Item = f64>, a: f64, b: f64) -> Result<Scale> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if !v.is_finite() {
                return Err(IguaneError::Validation(
                    "plot data contains non-finite values".into(),
                ));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return Err(IguaneError::Validation("plot data is empty".into()));
        }
        if lo == hi {
            // Degenerate span: pad so the point sits mid-axis.
            lo -= 1.0;
            hi += 1.0;
        }
        // 5% padding on both ends.
        let pad = 0.05 * (hi - lo);
        Ok(Scale {
            lo: lo - pad,
            hi: hi + pad,
            a,
            b,
        })
    }

    fn map(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }

    /// Five evenly spaced tick values.
    fn ticks(&self) -> [f64; 5] {
        let mut t = [0.0; 5];
        for (i, x) in t.iter_mut().enumerate() {
            *x = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
        }
        t
    }
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, xs: &Scale, ys: &Scale, x_label: &str, y_label: &str) {
    let x0 = MARGIN;
    let x1 = W - MARGIN;
    let y0 = H - MARGIN;
    let y1 = MARGIN;
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    for t in xs.ticks() {
        let px = xs.map(t);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y0}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            fmt(px),
            fmt(px),
            fmt(y0 + 5.0),
            fmt(px),
            fmt(y0 + 18.0),
            fmt(t)
        );
    }
    for t in ys.ticks() {
        let py = ys.map(t);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{x0}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            fmt(x0 - 5.0),
            fmt(py),
            fmt(py),
            fmt(x0 - 8.0),
            fmt(py + 4.0),
            fmt(t)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        W / 2.0,
        H - 12.0,
        xml_escape(x_label),
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );
}

/// A scatter plot with an optional least-squares line (`slope,
/// intercept` in data coordinates).
pub fn scatter_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    regression: Option<(f64, f64)>,
) -> Result<String> {
    if points.is_empty() {
        return Err(IguaneError::Validation("scatter plot needs points".into()));
    }
    let xs = Scale::new(points.iter().map(|p| p.0), MARGIN, W - MARGIN)?;
    let ys = Scale::new(points.iter().map(|p| p.1), H - MARGIN, MARGIN)?;
    let mut out = svg_header(title);
    axes(&mut out, &xs, &ys, x_label, y_label);
    if let Some((slope, intercept)) = regression {
        let (px0, px1) = (xs.lo, xs.hi);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"crimson\" \
             stroke-width=\"1.5\" class=\"regression\"/>",
            fmt(xs.map(px0)),
            fmt(ys.map(slope * px0 + intercept)),
            fmt(xs.map(px1)),
            fmt(ys.map(slope * px1 + intercept)),
        );
    }
    for &(x, y) in points {
        let _ = writeln!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.8\"/>",
            fmt(xs.map(x)),
            fmt(ys.map(y)),
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Tukey-style boxplots, one box per named group: median line, p25-p75
/// box, whiskers at the data extremes.
pub fn boxplot_svg(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> Result<String> {
    if groups.is_empty() || groups.iter().any(|(_, v)| v.is_empty()) {
        return Err(IguaneError::Validation(
            "boxplot needs at least one non-empty group".into(),
        ));
    }
    let ys = Scale::new(
        groups.iter().flat_map(|(_, v)| v.iter().copied()),
        H - MARGIN,
        MARGIN,
    )?;
    let n = groups.len() as f64;
    let slot = (W - 2.0 * MARGIN) / n;
    let box_w = slot * 0.5;

    let mut out = svg_header(title);
    // Y axis only; group names replace the x scale.
    let y0 = H - MARGIN;
    let _ = writeln!(
        out,
        "<line x1=\"{MARGIN}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{y0}\" x2=\"{MARGIN}\" y2=\"{MARGIN}\" stroke=\"black\"/>",
        W - MARGIN
    );
    for t in ys.ticks() {
        let py = ys.map(t);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
            fmt(MARGIN - 5.0),
            fmt(py),
            fmt(py),
            fmt(MARGIN - 8.0),
            fmt(py + 4.0),
            fmt(t)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    );

    for (i, (name, vals)) in groups.iter().enumerate() {
        let cx = MARGIN + slot * (i as f64 + 0.5);
        let q1 = percentile(vals, 25.0)?;
        let q2 = percentile(vals, 50.0)?;
        let q3 = percentile(vals, 75.0)?;
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (bx, bw) = (cx - box_w / 2.0, box_w);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
             <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"lightsteelblue\" \
             stroke=\"black\" class=\"box\"/>\n\
             <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\" \
             stroke-width=\"2\" class=\"median\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            // Whisker: min to box bottom.
            fmt(cx),
            fmt(ys.map(lo)),
            fmt(cx),
            fmt(ys.map(q1)),
            // Whisker: box top to max.
            fmt(cx),
            fmt(ys.map(q3)),
            fmt(cx),
            fmt(ys.map(hi)),
            // Box p25..p75 (y grows downward in pixels).
            fmt(bx),
            fmt(ys.map(q3)),
            fmt(bw),
            fmt(ys.map(q1) - ys.map(q3)),
            // Median line.
            fmt(bx),
            fmt(ys.map(q2)),
            fmt(bx + bw),
            fmt(ys.map(q2)),
            // Group label.
            fmt(cx),
            fmt(H - MARGIN + 18.0),
            xml_escape(name),
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes an SVG string to disk.
pub fn write_svg(svg: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| IguaneError::io(parent, e))?;
        }
    }
    std::fs::write(path, svg).map_err(|e| IguaneError::io(path, e))
}
