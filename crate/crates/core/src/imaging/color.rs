//! ITU-R BT.601 studio-swing YCbCr, with all channels scaled to `[0, 1]`.

use super::{ImagePlane, PlaneOrigin};
use crate::error::Result;

/// Rows: Y, Cb, Cr. Columns: R, G, B (inputs in [0, 1], outputs in 8-bit
/// code units before the offset).
const FORWARD: [[f64; 3]; 3] = [
    [65.481, 128.553, 24.966],
    [-37.797, -74.203, 112.0],
    [112.0, -93.786, -18.214],
];
const OFFSET: [f64; 3] = [16.0, 128.0, 128.0];

fn inverse(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // cofactor of (c, r), transposed
            let (r0, r1) = ((c + 1) % 3, (c + 2) % 3);
            let (c0, c1) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn check_dims(planes: [&ImagePlane; 3]) -> Result<()> {
    planes[0].ensure_same_dims(planes[1], "colour conversion")?;
    planes[0].ensure_same_dims(planes[2], "colour conversion")
}

/// BT.601 luma `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn to_luminance(r: &ImagePlane, g: &ImagePlane, b: &ImagePlane) -> Result<ImagePlane> {
    Ok(rgb_to_ycbcr(r, g, b)?[0].clone())
}

pub fn rgb_to_ycbcr(r: &ImagePlane, g: &ImagePlane, b: &ImagePlane) -> Result<[ImagePlane; 3]> {
    check_dims([r, g, b])?;
    let (w, h) = r.dims();
    let mut out: [Vec<f64>; 3] = Default::default();
    for ch in &mut out {
        ch.reserve(w * h);
    }
    for i in 0..w * h {
        let rgb = [r.samples()[i], g.samples()[i], b.samples()[i]];
        for (k, ch) in out.iter_mut().enumerate() {
            let v = FORWARD[k][0] * rgb[0] + FORWARD[k][1] * rgb[1] + FORWARD[k][2] * rgb[2];
            ch.push((v + OFFSET[k]) / 255.0);
        }
    }
    let [y, cb, cr] = out;
    Ok([
        ImagePlane::new(w, h, y, PlaneOrigin::Luminance)?,
        ImagePlane::new(w, h, cb, PlaneOrigin::Chroma)?,
        ImagePlane::new(w, h, cr, PlaneOrigin::Chroma)?,
    ])
}

/// Exact inverse of [`rgb_to_ycbcr`].
pub fn ycbcr_to_rgb(y: &ImagePlane, cb: &ImagePlane, cr: &ImagePlane) -> Result<[ImagePlane; 3]> {
    check_dims([y, cb, cr])?;
    let inv = inverse(&FORWARD);
    let (w, h) = y.dims();
    let mut out: [Vec<f64>; 3] = Default::default();
    for i in 0..w * h {
        let ycc = [
            y.samples()[i] * 255.0 - OFFSET[0],
            cb.samples()[i] * 255.0 - OFFSET[1],
            cr.samples()[i] * 255.0 - OFFSET[2],
        ];
        for (k, ch) in out.iter_mut().enumerate() {
            ch.push(inv[k][0] * ycc[0] + inv[k][1] * ycc[1] + inv[k][2] * ycc[2]);
        }
    }
    let [r, g, b] = out;
    Ok([
        ImagePlane::new(w, h, r, PlaneOrigin::RgbChannel)?,
        ImagePlane::new(w, h, g, PlaneOrigin::RgbChannel)?,
        ImagePlane::new(w, h, b, PlaneOrigin::RgbChannel)?,
    ])
}
