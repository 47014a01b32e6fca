//! Minimal SVG scatter emitter for snapshot visualization. Members keep a
//! fixed hue derived from their initial position (angle around the initial
//! centroid), so correspondence stays visible as the cloud moves.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 32.0;

/// Hue per member from the angle of its initial position around the initial
/// centroid, in degrees.
pub fn initial_hues(initial: &DMatrix<f64>) -> Vec<f64> {
    let n = initial.nrows();
    let cx = initial.column(0).sum() / n as f64;
    let cy = if initial.ncols() > 1 {
        initial.column(1).sum() / n as f64
    } else {
        0.0
    };
    (0..n)
        .map(|i| {
            let x = initial[(i, 0)] - cx;
            let y = if initial.ncols() > 1 { initial[(i, 1)] - cy } else { 0.0 };
            let deg = y.atan2(x).to_degrees();
            if deg < 0.0 { deg + 360.0 } else { deg }
        })
        .collect()
}

/// Shared plot window covering every snapshot (first two coordinates), so
/// all frames of one run align.
pub fn bounds(snapshots: &[DMatrix<f64>]) -> (f64, f64, f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for m in snapshots {
        for i in 0..m.nrows() {
            let x = m[(i, 0)];
            let y = if m.ncols() > 1 { m[(i, 1)] } else { 0.0 };
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    let pad = 0.05 * ((x1 - x0).max(y1 - y0).max(1e-9));
    (x0 - pad, x1 + pad, y0 - pad, y1 + pad)
}

/// Write one snapshot as an SVG scatter. Points use the first two state
/// coordinates; higher dimensions are projected.
pub fn write_scatter(
    path: &Path,
    points: &DMatrix<f64>,
    hues: &[f64],
    window: (f64, f64, f64, f64),
    title: &str,
) -> std::io::Result<()> {
    let (x0, x1, y0, y1) = window;
    let span_x = x1 - x0;
    let span_y = y1 - y0;
    let inner = SIZE - 2.0 * MARGIN;
    let scale = inner / span_x.max(span_y);
    let to_px = |x: f64, y: f64| {
        (
            MARGIN + (x - x0) * scale,
            // SVG y grows downward.
            SIZE - MARGIN - (y - y0) * scale,
        )
    };
    let radius = (0.006 * inner).max(1.5);

    let mut out = String::with_capacity(128 * points.nrows() + 512);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        out,
        r##"<rect width="{SIZE}" height="{SIZE}" fill="white" stroke="#888"/>"##
    );
    let _ = writeln!(
        out,
        r##"<text x="{MARGIN}" y="22" font-family="monospace" font-size="14" fill="#333">{title}</text>"##
    );
    for i in 0..points.nrows() {
        let x = points[(i, 0)];
        let y = if points.ncols() > 1 { points[(i, 1)] } else { 0.0 };
        let (px, py) = to_px(x, y);
        let _ = writeln!(
            out,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="{radius:.2}" fill="hsl({:.1}, 80%, 45%)" fill-opacity="0.8"/>"#,
            hues[i]
        );
    }
    let _ = writeln!(out, "</svg>");
    std::fs::write(path, out)
}
