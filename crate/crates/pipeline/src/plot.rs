//! Minimal static SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        let pad = if hi == 0.0 { 1.0 } else { hi.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.08;
    (lo - pad, hi + pad)
}

fn header(svg: &mut String, title: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (x0, y0, x1, y1) = (LEFT, TOP, W - RIGHT, H - BOTTOM);
    let _ = write!(svg, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
}

fn y_ticks(svg: &mut String, lo: f64, hi: f64, x: f64, anchor: &str, dx: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - BOTTOM - (H - TOP - BOTTOM) * i as f64 / 4.0;
        let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="{anchor}">{}</text>"#, x + dx, y + 4.0, fmt_tick(v));
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

/// Two series over the same x values with independent y axes.
pub fn dual_axis_lines(title: &str, x_label: &str, xs: &[f64], left: (&str, &[f64]), right: (&str, &[f64])) -> String {
    let mut svg = String::new();
    header(&mut svg, title);
    let (xlo, xhi) = range(xs);
    let sx = |x: f64| LEFT + (x - xlo) / (xhi - xlo) * (W - LEFT - RIGHT);
    for &x in xs {
        let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, sx(x), H - BOTTOM + 16.0, fmt_tick(x));
    }
    let _ = write!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 18.0, escape(x_label));
    for (side, (label, ys), color) in [(0, left, COLORS[0]), (1, right, COLORS[1])] {
        let (lo, hi) = range(ys);
        let sy = |y: f64| H - BOTTOM - (y - lo) / (hi - lo) * (H - TOP - BOTTOM);
        let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = write!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for (&x, &y) in xs.iter().zip(ys) {
            let _ = write!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, sx(x), sy(y));
        }
        let (axis_x, anchor, dx, lx) = if side == 0 { (LEFT, "end", -6.0, 16.0) } else { (W - RIGHT, "start", 6.0, W - 16.0) };
        y_ticks(&mut svg, lo, hi, axis_x, anchor, dx);
        let cy = H / 2.0;
        let _ = write!(
            svg,
            r#"<text x="{lx}" y="{cy}" fill="{color}" text-anchor="middle" transform="rotate(-90 {lx} {cy})">{}</text>"#,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// One group of bars per entry of `groups`, one bar per series inside it.
pub fn grouped_bars(title: &str, groups: &[String], series: &[(String, Vec<f64>)], y_label: &str) -> String {
    let mut svg = String::new();
    header(&mut svg, title);
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).chain([0.0]).collect();
    let hi = all.iter().copied().fold(0.0, f64::max).max(1e-12) * 1.1;
    let sy = |y: f64| H - BOTTOM - y / hi * (H - TOP - BOTTOM);
    let group_w = (W - LEFT - RIGHT) / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let gx = LEFT + g as f64 * group_w + group_w * 0.1;
        for (s, (_, values)) in series.iter().enumerate() {
            let v = values.get(g).copied().unwrap_or(0.0);
            let _ = write!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + s as f64 * bar_w,
                sy(v),
                bar_w * 0.9,
                H - BOTTOM - sy(v),
                COLORS[s % COLORS.len()]
            );
        }
        let _ = write!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + group_w * 0.4, H - BOTTOM + 16.0, escape(name));
    }
    y_ticks(&mut svg, 0.0, hi, LEFT, "end", -6.0);
    let cy = H / 2.0;
    let _ = write!(svg, r#"<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})">{}</text>"#, escape(y_label));
    for (s, (name, _)) in series.iter().enumerate() {
        let y = TOP + 14.0 + s as f64 * 16.0;
        let x = W - RIGHT - 170.0;
        let _ = write!(svg, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[s % COLORS.len()]);
        let _ = write!(svg, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}
