//! Static SVG figures. Every number is printed with a fixed precision so the
//! output is byte-stable.

use std::fmt::Write as _;

use markerq::nn::Tensor;
use markerq::quality::ComboStat;

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 48.0;

struct Canvas {
    out: String,
}

impl Canvas {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            width / 2.0,
            escape(title)
        );
        Canvas { out }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, style: &str) {
        let _ = writeln!(self.out, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" {style}/>"#);
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(self.out, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#, escape(s));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(self.out, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#);
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear map from `[lo, hi]` onto `[a, b]`.
fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

fn axes(c: &mut Canvas, xlabel: &str, ylabel: &str, x_ticks: &[(f64, String)], y_ticks: &[(f64, String)]) {
    let axis = r#"stroke="black""#;
    c.line(M, H - M, W - M / 2.0, H - M, axis);
    c.line(M, M / 2.0 + 8.0, M, H - M, axis);
    for (x, label) in x_ticks {
        c.line(*x, H - M, *x, H - M + 4.0, axis);
        c.text(*x, H - M + 15.0, "middle", label);
    }
    for (y, label) in y_ticks {
        c.line(M - 4.0, *y, M, *y, axis);
        c.text(M - 6.0, y + 3.5, "end", label);
    }
    c.text((M + W - M / 2.0) / 2.0, H - 10.0, "middle", xlabel);
    let _ = writeln!(
        c.out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

/// Per-combination mean predicted vs mean true quality, SD bars on both
/// axes, with the identity line.
pub fn quality_scatter(title: &str, stats: &[ComboStat]) -> String {
    let mut c = Canvas::new(W, H, title);
    let (x0, x1, y0, y1) = (M, W - M / 2.0, H - M, M / 2.0 + 8.0);
    let px = |v: f64| scale(v, 0.0, 1.0, x0, x1);
    let py = |v: f64| scale(v, 0.0, 1.0, y0, y1);
    let ticks: Vec<f64> = (0..=5).map(|i| i as f64 / 5.0).collect();
    let xt: Vec<_> = ticks.iter().map(|&t| (px(t), format!("{t:.1}"))).collect();
    let yt: Vec<_> = ticks.iter().map(|&t| (py(t), format!("{t:.1}"))).collect();
    axes(&mut c, "true F1 (mean over folds)", "predicted F1 (mean over folds)", &xt, &yt);
    c.line(px(0.0), py(0.0), px(1.0), py(1.0), r##"stroke="#999" stroke-dasharray="4 3""##);
    let bar = r##"stroke="#3465a4" stroke-width="1""##;
    for s in stats {
        let (x, y) = (px(s.mean_true.clamp(0.0, 1.0)), py(s.mean_pred.clamp(-0.05, 1.05)));
        c.line(px((s.mean_true - s.sd_true).max(0.0)), y, px((s.mean_true + s.sd_true).min(1.0)), y, bar);
        c.line(x, py(s.mean_pred - s.sd_pred), x, py(s.mean_pred + s.sd_pred), bar);
        let _ = writeln!(c.out, r##"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="#3465a4"><title>{}</title></circle>"##, s.combination);
    }
    c.finish()
}

/// Bars of `(label, mean, sd)`.
pub fn bars(title: &str, ylabel: &str, items: &[(String, f64, f64)]) -> String {
    let mut c = Canvas::new(W, H, title);
    let top = items.iter().map(|(_, m, s)| m + s).fold(0.0, f64::max).max(1e-9) * 1.1;
    let (x0, x1, y0, y1) = (M, W - M / 2.0, H - M, M / 2.0 + 8.0);
    let py = |v: f64| scale(v, 0.0, top, y0, y1);
    let slot = (x1 - x0) / items.len().max(1) as f64;
    let xt: Vec<_> = items
        .iter()
        .enumerate()
        .map(|(i, (l, _, _))| (x0 + slot * (i as f64 + 0.5), l.clone()))
        .collect();
    let yt: Vec<_> = (0..=4).map(|i| top * i as f64 / 4.0).map(|t| (py(t), format!("{t:.3}"))).collect();
    axes(&mut c, "", ylabel, &xt, &yt);
    for (i, (_, m, s)) in items.iter().enumerate() {
        let cx = x0 + slot * (i as f64 + 0.5);
        c.rect(cx - slot * 0.3, py(*m), slot * 0.6, y0 - py(*m), "#729fcf");
        c.line(cx, py(m - s), cx, py(m + s), r#"stroke="black""#);
        c.text(cx, py(*m) - 4.0, "middle", &format!("{m:.4}"));
    }
    c.finish()
}

/// Histogram of `values` with a marker at the median.
pub fn histogram(title: &str, xlabel: &str, values: &[f64], bins: usize, median: f64) -> String {
    let mut c = Canvas::new(W, H, title);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64).floor() as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let (x0, x1, y0, y1) = (M, W - M / 2.0, H - M, M / 2.0 + 8.0);
    let px = |v: f64| scale(v, lo, hi, x0, x1);
    let py = |v: f64| scale(v, 0.0, top, y0, y1);
    let xt: Vec<_> = (0..=4)
        .map(|i| lo + (hi - lo) * i as f64 / 4.0)
        .map(|t| (px(t), format!("{t:.2}")))
        .collect();
    let yt: Vec<_> = (0..=4).map(|i| top * i as f64 / 4.0).map(|t| (py(t), format!("{t:.0}"))).collect();
    axes(&mut c, xlabel, "count", &xt, &yt);
    let bw = (x1 - x0) / bins as f64;
    for (i, &n) in counts.iter().enumerate() {
        let y = py(n as f64);
        c.rect(x0 + bw * i as f64, y, bw * 0.95, y0 - y, "#8ae234");
    }
    c.line(px(0.0), y0, px(0.0), y1, r##"stroke="#555" stroke-dasharray="2 2""##);
    if median.is_finite() {
        c.line(px(median), y0, px(median), y1, r##"stroke="#cc0000" stroke-width="2""##);
        c.text(px(median), y1 + 10.0, "middle", &format!("median {median:.4}"));
    }
    c.finish()
}

/// Grey-scale heat maps side by side, each normalised to its own range.
pub fn heatmaps(title: &str, maps: &[(&str, &Tensor)]) -> String {
    let cell = 3.0;
    let pad = 16.0;
    let side = maps.iter().map(|(_, t)| t.shape()[1]).max().unwrap_or(1) as f64 * cell;
    let width = pad + maps.len() as f64 * (side + pad);
    let mut c = Canvas::new(width, side + 70.0, title);
    for (i, (name, t)) in maps.iter().enumerate() {
        let (h, w) = (t.shape()[0], t.shape()[1]);
        let ox = pad + i as f64 * (side + pad);
        let oy = 40.0;
        let lo = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for y in 0..h {
            for x in 0..w {
                let v = scale(t.data()[y * w + x], lo, hi, 0.0, 255.0).round() as u8;
                c.rect(ox + x as f64 * cell, oy + y as f64 * cell, cell, cell, &format!("#{v:02x}{v:02x}{v:02x}"));
            }
        }
        c.text(ox + side / 2.0, oy - 6.0, "middle", name);
        c.text(ox + side / 2.0, oy + side + 14.0, "middle", &format!("[{lo:.3}, {hi:.3}]"));
    }
    c.finish()
}
