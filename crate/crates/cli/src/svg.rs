//! Small static SVG charts. Coordinates are printed with fixed precision so
//! identical inputs give identical bytes.

use std::fmt::Write;

use nalgebra::{DMatrix, SymmetricEigen};

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn axes(out: &mut String, x_label: &str, y_label: &str, xr: (f64, f64), yr: (f64, f64)) {
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="{:.1}">{:.3}</text>"#, H - MARGIN + 14.0, xr.0);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
        W - MARGIN,
        H - MARGIN + 14.0,
        xr.1
    );
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, H - MARGIN, yr.0);
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, MARGIN - 4.0, MARGIN + 8.0, yr.1);
}

fn to_px(v: f64, r: (f64, f64), lo_px: f64, hi_px: f64) -> f64 {
    lo_px + (v - r.0) / (r.1 - r.0) * (hi_px - lo_px)
}

/// Projection onto the two leading principal components, signs fixed so the
/// largest-magnitude loading of each component is positive.
pub fn project_2d(points: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let k = points[0].len();
    let mean: Vec<f64> = (0..k).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, k, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |idx: Option<&usize>| -> Vec<f64> {
        let Some(&c) = idx else { return vec![0.0; k] };
        let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter().map(|x| -x).collect()
        } else {
            v
        }
    };
    let c1 = component(order.first());
    let c2 = component(order.get(1));
    (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            (dot(&c1), dot(&c2))
        })
        .collect()
}

/// Labelled scatter plot.
pub fn scatter(points: &[(f64, f64)], labels: &[String], title: &str) -> String {
    let mut out = String::new();
    header(&mut out, W, H, title);
    let xr = range(points.iter().map(|p| p.0));
    let yr = range(points.iter().map(|p| p.1));
    axes(&mut out, "component 1", "component 2", xr, yr);
    for (i, (p, label)) in points.iter().zip(labels).enumerate() {
        let x = to_px(p.0, xr, MARGIN, W - MARGIN);
        let y = to_px(p.1, yr, H - MARGIN, MARGIN);
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="{color}"/>"#);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 7.0, y - 7.0, escape(label));
    }
    out.push_str("</svg>\n");
    out
}

/// Grid heatmap of per-cell values, row `y` of the grid drawn top to bottom.
pub fn heatmap(values: &[f64], width: usize, height: usize, title: &str) -> String {
    let cell = (320.0 / width.max(height) as f64).clamp(8.0, 64.0);
    let total_w = cell * width as f64 + 2.0 * MARGIN;
    let total_h = cell * height as f64 + 2.0 * MARGIN + 16.0;
    let mut out = String::new();
    header(&mut out, total_w, total_h, title);
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    for (s, &v) in values.iter().enumerate() {
        let (x, y) = (s % width, s / width);
        let t = if max > 0.0 { v / max } else { 0.0 };
        // White to dark blue.
        let r = (255.0 * (1.0 - t) + 8.0 * t).round() as u8;
        let g = (255.0 * (1.0 - t) + 48.0 * t).round() as u8;
        let b = (255.0 * (1.0 - t) + 107.0 * t).round() as u8;
        let px = MARGIN + cell * x as f64;
        let py = MARGIN + cell * y as f64;
        let _ = writeln!(
            out,
            r##"<rect x="{px:.1}" y="{py:.1}" width="{cell:.1}" height="{cell:.1}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#ccc"/>"##
        );
        if cell >= 28.0 {
            let fill = if t > 0.55 { "white" } else { "black" };
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="9" fill="{fill}">{v:.3}</text>"#,
                px + cell / 2.0,
                py + cell / 2.0 + 3.0
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.1}">max {max:.4}</text>"#,
        total_h - 10.0
    );
    out.push_str("</svg>\n");
    out
}

/// Line plot of several series sharing an x axis.
pub fn line_plot(x: &[f64], series: &[(&str, Vec<f64>)], x_label: &str, title: &str) -> String {
    let mut out = String::new();
    header(&mut out, W, H, title);
    let xr = range(x.iter().copied());
    let yr = range(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    axes(&mut out, x_label, "value", xr, yr);
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .map(|(&a, &b)| format!("{:.2},{:.2}", to_px(a, xr, MARGIN, W - MARGIN), to_px(b, yr, H - MARGIN, MARGIN)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            W - MARGIN - 90.0,
            MARGIN + 14.0 + 14.0 * i as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Keeps at most `max` evenly spaced indices (always including the last).
pub fn thin_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max || max < 2 {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..max - 1).map(|i| i * (len - 1) / (max - 1)).collect();
    idx.push(len - 1);
    idx.dedup();
    idx
}
