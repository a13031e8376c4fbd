//! Minimal native SVG scatter plot; no plotting dependency.

use dp_diffusion::Point2;

pub fn scatter_svg(points: &[Point2]) -> String {
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (-1.2f64, 1.2f64, -1.2f64, 1.2f64);
    for p in points {
        lo_x = lo_x.min(p.x);
        hi_x = hi_x.max(p.x);
        lo_y = lo_y.min(p.y);
        hi_y = hi_y.max(p.y);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let pad = 0.05 * span;
    let (x0, y0) = (lo_x - pad, lo_y - pad);
    let extent = span + 2.0 * pad;
    let size = 640.0;
    let scale = size / extent;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">
<rect width="{size}" height="{size}" fill="white"/>
"#
    );
    let r = (0.004 * size).max(0.8);
    for p in points {
        let cx = (p.x - x0) * scale;
        // SVG y grows downward.
        let cy = size - (p.y - y0) * scale;
        out.push_str(&format!(
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="black" fill-opacity="0.35"/>"#
        ));
        out.push('\n');
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn produces_wellformed_svg() {
        let pts = vec![Point2::new(0.0, 0.0), Point2::new(0.5, -0.5)];
        let svg = scatter_svg(&pts);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
