use super::ImagePlane;
use crate::error::{Error, Result};

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax * ax * ax - 2.5 * ax * ax + 1.0
    } else if ax < 2.0 {
        -0.5 * ax * ax * ax + 2.5 * ax * ax - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Normalised taps contributing to one output sample.
struct Taps {
    first: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

/// Resampling taps for one axis. When shrinking, the kernel is stretched by
/// the inverse scale to low-pass the input.
fn axis_taps(in_len: usize, out_len: usize) -> Taps {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    let taps = width.ceil() as usize + 2;
    let mut t = Taps {
        first: Vec::with_capacity(out_len + 1),
        indices: Vec::new(),
        weights: Vec::new(),
    };
    for i in 0..out_len {
        // Pixel centres are aligned: output i ↔ source (i + ½)/scale − ½.
        let u = (i as f64 + 0.5) / scale - 0.5;
        let left = (u - width / 2.0).floor() as isize;
        let start = t.indices.len();
        t.first.push(start);
        let mut sum = 0.0;
        for k in 0..taps {
            let j = left + k as isize;
            let w = kscale * cubic_kernel(kscale * (u - j as f64));
            if w == 0.0 {
                continue;
            }
            t.indices.push(j.clamp(0, in_len as isize - 1) as usize);
            t.weights.push(w);
            sum += w;
        }
        for w in &mut t.weights[start..] {
            *w /= sum;
        }
    }
    t.first.push(t.indices.len());
    t
}

/// Separable bicubic resampling (rows first, then columns) with clamped
/// edges and antialiasing on downscale.
pub fn bicubic_resize(plane: &ImagePlane, out_w: usize, out_h: usize) -> Result<ImagePlane> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "output size must be positive, got {out_w}x{out_h}"
        )));
    }
    let (w, h) = plane.dims();
    let src = plane.samples();

    // Vertical pass: h → out_h, width unchanged.
    let vt = axis_taps(h, out_h);
    let mut mid = vec![0.0; w * out_h];
    for i in 0..out_h {
        let dst = &mut mid[i * w..(i + 1) * w];
        for t in vt.first[i]..vt.first[i + 1] {
            let (row, wt) = (vt.indices[t], vt.weights[t]);
            for (d, &s) in dst.iter_mut().zip(&src[row * w..(row + 1) * w]) {
                *d += wt * s;
            }
        }
    }

    // Horizontal pass: w → out_w.
    let ht = axis_taps(w, out_w);
    let mut out = vec![0.0; out_w * out_h];
    for i in 0..out_h {
        let srow = &mid[i * w..(i + 1) * w];
        let drow = &mut out[i * out_w..(i + 1) * out_w];
        for (j, d) in drow.iter_mut().enumerate() {
            *d = (ht.first[j]..ht.first[j + 1])
                .map(|t| ht.weights[t] * srow[ht.indices[t]])
                .sum();
        }
    }
    ImagePlane::new(out_w, out_h, out, plane.origin())
}
