//! Minimal SVG scatter plots with mixture contour ellipses.

use std::fmt::Write;

use ndarray::ArrayView2;

use crate::error::{check_dim, Result};
use crate::oracle::MixtureSpec;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;
const PALETTE: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];

fn color(label: usize) -> &'static str {
    if label == 0 {
        "#222222"
    } else {
        PALETTE[(label - 1) % PALETTE.len()]
    }
}

/// Scatter of the first two coordinates of `samples`, colored by `labels`
/// (0 = unlabeled), over 1- and 2-sigma circles of every mixture component.
pub fn scatter_svg(
    samples: ArrayView2<'_, f64>,
    labels: &[usize],
    mix: Option<&MixtureSpec>,
    title: &str,
) -> Result<String> {
    check_dim(samples.nrows(), labels.len())?;
    check_dim(2, samples.ncols().min(2))?;

    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut extend = |x: f64, y: f64, r: f64| {
        lo[0] = lo[0].min(x - r);
        lo[1] = lo[1].min(y - r);
        hi[0] = hi[0].max(x + r);
        hi[1] = hi[1].max(y + r);
    };
    for row in samples.rows() {
        if row[0].is_finite() && row[1].is_finite() {
            extend(row[0], row[1], 0.0);
        }
    }
    if let Some(mix) = mix {
        for c in &mix.concepts {
            for k in &c.components {
                extend(k.mean[0], k.mean[1], 2.0 * k.variance.sqrt());
            }
        }
    }
    if !lo[0].is_finite() {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f64| MARGIN + (x - lo[0]) * scale;
    let py = |y: f64| SIZE - MARGIN - (y - lo[1]) * scale;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(svg, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(
        svg,
        r##"<rect width="100%" height="100%" fill="#ffffff"/>"##
    );
    if let Some(mix) = mix {
        for (ci, c) in mix.concepts.iter().enumerate() {
            for k in &c.components {
                let sd = k.variance.sqrt();
                for m in [1.0, 2.0] {
                    let _ = writeln!(
                        svg,
                        r#"<ellipse class="contour" cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" fill="none" stroke="{}" stroke-opacity="0.6"/>"#,
                        px(k.mean[0]),
                        py(k.mean[1]),
                        m * sd * scale,
                        m * sd * scale,
                        color(ci + 1)
                    );
                }
            }
        }
    }
    for (row, &l) in samples.rows().into_iter().zip(labels) {
        let _ = writeln!(
            svg,
            r#"<circle class="sample" cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.7"/>"#,
            px(row[0]),
            py(row[1]),
            color(l)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::preset;
    use ndarray::array;

    #[test]
    fn one_marker_per_sample() {
        let mix = preset("four-corners").unwrap();
        let x = array![[0.0, 0.0], [4.0, 4.0], [-3.0, 2.0]];
        let svg = scatter_svg(x.view(), &[1, 2, 0], Some(&mix), "a<b").unwrap();
        assert_eq!(svg.matches(r#"class="sample""#).count(), 3);
        assert_eq!(svg.matches(r#"class="contour""#).count(), 8);
        assert!(svg.contains("a&lt;b"));
        assert!(scatter_svg(x.view(), &[1], None, "").is_err());
    }
}
