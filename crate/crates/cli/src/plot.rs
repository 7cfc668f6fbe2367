//! Scatter plots of real and generated samples as SVG.
//!
//! Real samples are hollow circles, generated samples filled circles, one
//! color per class. Only the first two coordinates are drawn.

use std::fmt::Write;

use mhgan::Tensor;

pub const SIZE: f32 = 800.0;
const MARGIN: f32 = 40.0;
const LEGEND_W: f32 = 150.0;

/// Ten mutually distinct colors; classes beyond ten wrap.
pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

fn pts(t: &Tensor) -> impl Iterator<Item = (f32, f32)> + '_ {
    (0..t.rows()).map(move |r| xy(t, r))
}

fn xy(t: &Tensor, r: usize) -> (f32, f32) {
    let row = t.row(r);
    (row[0], row.get(1).copied().unwrap_or(0.0))
}

pub fn scatter_svg(real: (&Tensor, &[usize]), fake: (&Tensor, &[usize]), classes: usize) -> String {
    let (mut lo, mut hi) = ((f32::MAX, f32::MAX), (f32::MIN, f32::MIN));
    for (x, y) in pts(real.0).chain(pts(fake.0)).filter(|(x, y)| x.is_finite() && y.is_finite()) {
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    if lo.0 > hi.0 {
        (lo, hi) = ((-1.0, -1.0), (1.0, 1.0));
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-6);
    let plot = SIZE - 2.0 * MARGIN - LEGEND_W;
    let map = |(x, y): (f32, f32)| (MARGIN + (x - lo.0) / span * plot, SIZE - MARGIN - (y - lo.1) / span * plot);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="800" viewBox="0 0 800 800">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="800" height="800" fill="white"/>"#);
    let _ = writeln!(s, r#"<g id="real">"#);
    for r in 0..real.0.rows() {
        let (x, y) = xy(real.0, r);
        if x.is_finite() && y.is_finite() {
            let (px, py) = map((x, y));
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="none" stroke="{}" stroke-width="1"/>"#, color(real.1[r]));
        }
    }
    let _ = writeln!(s, "</g>\n<g id=\"generated\">");
    for r in 0..fake.0.rows() {
        let (x, y) = xy(fake.0, r);
        if x.is_finite() && y.is_finite() {
            let (px, py) = map((x, y));
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#, color(fake.1[r]));
        }
    }
    let _ = writeln!(s, "</g>\n<g id=\"legend\" font-family=\"sans-serif\" font-size=\"12\">");
    let lx = SIZE - LEGEND_W;
    let _ = writeln!(s, r#"<circle cx="{}" cy="30" r="4" fill="none" stroke="black"/><text x="{}" y="34">real</text>"#, lx, lx + 12.0);
    let _ = writeln!(s, r#"<circle cx="{}" cy="50" r="4" fill="black"/><text x="{}" y="54">generated</text>"#, lx, lx + 12.0);
    for c in 0..classes {
        let y = 80.0 + 18.0 * c as f32;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">class {c}</text>"#, lx - 5.0, y - 8.0, color(c), lx + 12.0, y + 1.0);
    }
    let _ = writeln!(s, "</g>\n</svg>");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> String {
        let real = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 0.5]]);
        let fake = Tensor::from_rows(&[vec![0.1, 0.1], vec![0.9, f32::NAN]]);
        scatter_svg((&real, &[0, 1, 2]), (&fake, &[0, 1]), 3)
    }

    #[test]
    fn well_formed_with_fixed_viewbox() {
        let s = sample();
        let doc = roxmltree::Document::parse(&s).unwrap();
        let root = doc.root_element();
        assert_eq!(root.attribute("viewBox"), Some("0 0 800 800"));
        let hollow = doc.descendants().filter(|n| n.has_tag_name("circle") && n.attribute("fill") == Some("none")).count();
        // 3 real points plus the legend entry; the NaN fake is dropped.
        assert_eq!(hollow, 4);
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("text")).count(), 5);
    }

    #[test]
    fn palette_is_distinct() {
        let mut p = PALETTE.to_vec();
        p.sort();
        p.dedup();
        assert_eq!(p.len(), 10);
    }

    #[test]
    fn output_is_deterministic() {
        assert_eq!(sample(), sample());
    }
}
