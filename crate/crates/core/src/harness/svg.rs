//! Small self-contained SVG charts: grouped box plots and x/y line or
//! scatter plots.

use crate::metrics::quantile;
use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 70.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = (hi - lo) * 0.05;
        Frame {
            lo: lo - pad,
            hi: hi + pad,
        }
    }

    fn y(&self, v: f64) -> f64 {
        let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
        MARGIN_T + plot_h * (1.0 - (v - self.lo) / (self.hi - self.lo))
    }

    fn x(&self, v: f64) -> f64 {
        let plot_w = WIDTH - MARGIN_L - MARGIN_R;
        MARGIN_L + plot_w * (v - self.lo) / (self.hi - self.lo)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn y_axis(out: &mut String, f: &Frame, label: &str) {
    let _ = write!(
        out,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN_B
    );
    for k in 0..=5 {
        let v = f.lo + (f.hi - f.lo) * k as f64 / 5.0;
        let y = f.y(v);
        let _ = write!(
            out,
            r##"<line x1="{}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            MARGIN_L,
            WIDTH - MARGIN_R,
            MARGIN_L - 6.0,
            y + 4.0
        );
    }
    let _ = write!(
        out,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (HEIGHT - MARGIN_B + MARGIN_T) / 2.0,
        escape(label)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (k, n) in names.iter().enumerate() {
        let y = MARGIN_T + 18.0 * k as f64;
        let x = WIDTH - MARGIN_R + 16.0;
        let _ = write!(
            out,
            r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            PALETTE[k % PALETTE.len()],
            x + 18.0,
            y + 11.0,
            escape(n)
        );
    }
}

/// Box plots (whiskers at min/max) for each category, one box per series.
pub fn box_plot(title: &str, y_label: &str, series: &[String], categories: &[(String, Vec<Vec<f64>>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let f = Frame::new(categories.iter().flat_map(|(_, s)| s.iter().flatten().copied()));
    y_axis(&mut out, &f, y_label);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let slot = plot_w / categories.len().max(1) as f64;
    let box_w = (slot * 0.8 / series.len().max(1) as f64).min(40.0);
    for (c, (name, groups)) in categories.iter().enumerate() {
        let centre = MARGIN_L + slot * (c as f64 + 0.5);
        let _ = write!(
            out,
            r#"<text x="{centre:.1}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN_B + 18.0,
            escape(name)
        );
        for (k, values) in groups.iter().enumerate() {
            let q = |p| quantile(values, p);
            let (Some(lo), Some(q1), Some(med), Some(q3), Some(hi)) = (q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)) else {
                continue;
            };
            let x = centre + box_w * (k as f64 - groups.len() as f64 / 2.0);
            let colour = PALETTE[k % PALETTE.len()];
            let mid = x + box_w / 2.0;
            let _ = write!(
                out,
                r#"<line x1="{mid:.1}" y1="{:.1}" x2="{mid:.1}" y2="{:.1}" stroke="{colour}"/>"#,
                f.y(hi),
                f.y(lo)
            );
            let _ = write!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{colour}" fill-opacity="0.35" stroke="{colour}"/>"#,
                x + 2.0,
                f.y(q3),
                box_w - 4.0,
                (f.y(q1) - f.y(q3)).max(0.5)
            );
            let _ = write!(
                out,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{colour}" stroke-width="2"/>"#,
                x + 2.0,
                f.y(med),
                x + box_w - 2.0,
                f.y(med)
            );
        }
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

/// X/Y chart; `lines` joins the points of each series in order.
pub fn xy_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], lines: bool) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let fy = Frame::new(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let fx = Frame::new(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    y_axis(&mut out, &fy, y_label);
    let base = HEIGHT - MARGIN_B;
    let _ = write!(
        out,
        r#"<line x1="{MARGIN_L}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        WIDTH - MARGIN_R
    );
    for k in 0..=5 {
        let v = fx.lo + (fx.hi - fx.lo) * k as f64 / 5.0;
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{v:.3}</text>"#,
            fx.x(v),
            base + 18.0
        );
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 20.0,
        escape(x_label)
    );
    for (k, (_, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let finite: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        if lines && finite.len() > 1 {
            let path: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.1},{:.1}", fx.x(x), fy.y(y))).collect();
            let _ = write!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in &finite {
            let _ = write!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{colour}"/>"#,
                fx.x(x),
                fy.y(y)
            );
        }
    }
    let names: Vec<String> = series.iter().map(|s| s.0.clone()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let b = box_plot(
            "t <1>",
            "DSC",
            &["A".into(), "B".into()],
            &[("base".into(), vec![vec![0.8, 0.9, 0.95], vec![0.7]])],
        );
        assert!(b.starts_with("<svg") && b.trim_end().ends_with("</svg>"));
        assert!(b.contains("t &lt;1&gt;"));
        assert_eq!(b.matches("<rect x=").count(), 2 + 2);
        let x = xy_plot("s", "x", "y", &[("A".into(), vec![(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)])], true);
        assert_eq!(x.matches("<circle").count(), 2);
        assert!(x.contains("<polyline"));
    }
}
