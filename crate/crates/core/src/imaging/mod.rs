//! Image planes, colour conversion, bicubic resampling and the
//! super-resolution degradation protocol.

mod color;
mod io;
mod resize;

pub use color::{rgb_to_ycbcr, to_luminance, ycbcr_to_rgb};
pub use io::{
    is_supported_image, list_images, load_image, load_luminance, save_planes_png, DecodedImage,
};
pub use resize::{bicubic_resize, cubic_kernel};

use crate::autodiff::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Where a plane's samples came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlaneOrigin {
    Luminance,
    RgbChannel,
    Chroma,
}

/// A single-channel image with samples nominally in `[0, 1]`, row-major.
///
/// Samples are only clamped when the plane is quantized for output or
/// metrics; intermediate values may leave the range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    samples: Vec<f64>,
    origin: PlaneOrigin,
}

impl ImagePlane {
    pub fn new(
        width: usize,
        height: usize,
        samples: Vec<f64>,
        origin: PlaneOrigin,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "empty image plane {width}x{height}"
            )));
        }
        if samples.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} plane needs {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        Ok(ImagePlane {
            width,
            height,
            samples,
            origin,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            vec![value; width * height],
            PlaneOrigin::Luminance,
        )
    }

    /// Builds a luminance plane from a function of (column, row).
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let samples = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self::new(width, height, samples, PlaneOrigin::Luminance)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn origin(&self) -> PlaneOrigin {
        self.origin
    }

    pub fn with_origin(mut self, origin: PlaneOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.samples[y * self.width + x]
    }

    /// Sub-rectangle starting at column `left`, row `top`.
    pub fn crop(&self, left: usize, top: usize, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || left + width > self.width || top + height > self.height {
            return Err(Error::Dimension(format!(
                "crop {width}x{height}+{left}+{top} outside {}x{} plane",
                self.width, self.height
            )));
        }
        let mut samples = Vec::with_capacity(width * height);
        for y in top..top + height {
            let row = y * self.width;
            samples.extend_from_slice(&self.samples[row + left..row + left + width]);
        }
        Self::new(width, height, samples, self.origin)
    }

    /// 8-bit code values `round(clamp(v, 0, 1) · 255)`.
    pub fn quantized(&self) -> Vec<u8> {
        self.samples.iter().map(|&v| quantize(v)).collect()
    }

    pub fn ensure_same_dims(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// A 1×1×h×w tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.samples.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("plane dimensions are positive")
    }

    /// Channel `channel` of batch item `item` of `t`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, item: usize, channel: usize) -> Result<Self> {
        let s = t.shape();
        if item >= s.batch || channel >= s.channels {
            return Err(Error::Dimension(format!(
                "no item {item} channel {channel} in tensor {s}"
            )));
        }
        let start = t.index(item, channel, 0, 0);
        let samples = t.data()[start..start + s.plane_len()]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        Self::new(s.width, s.height, samples, PlaneOrigin::Luminance)
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Ground truth and the network input derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub ground_truth: ImagePlane,
    /// Bicubic-upscaled low-resolution image, same size as `ground_truth`.
    pub input: ImagePlane,
    pub scale: usize,
}

/// Crops to the largest top-left-anchored size divisible by `scale`.
pub fn modulo_crop(plane: &ImagePlane, scale: usize) -> Result<ImagePlane> {
    if scale < 1 {
        return Err(Error::InvalidArgument("scale must be at least 1".into()));
    }
    let w = plane.width / scale * scale;
    let h = plane.height / scale * scale;
    if w == 0 || h == 0 {
        return Err(Error::Data(format!(
            "{}x{} image is smaller than scale {scale}",
            plane.width, plane.height
        )));
    }
    plane.crop(0, 0, w, h)
}

/// Bicubic degradation: crop to a multiple of `scale`, downscale by `scale`,
/// upscale back to the cropped size.
pub fn make_eval_pair(hr: &ImagePlane, scale: usize) -> Result<EvalPair> {
    if !(2..=4).contains(&scale) {
        return Err(Error::InvalidArgument(format!(
            "scale must be 2, 3 or 4, got {scale}"
        )));
    }
    let ground_truth = modulo_crop(hr, scale)?;
    let (w, h) = ground_truth.dims();
    let lr = bicubic_resize(&ground_truth, w / scale, h / scale)?;
    let input = bicubic_resize(&lr, w, h)?;
    Ok(EvalPair {
        ground_truth,
        input,
        scale,
    })
}

/// Co-located training patches cut from the same rectangle of both planes.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub left: usize,
    pub top: usize,
    pub input: ImagePlane,
    pub target: ImagePlane,
}

/// Number of grid positions along one axis of length `len`.
pub fn patch_count_along(len: usize, size: usize, stride: usize) -> usize {
    if len < size {
        0
    } else {
        (len - size) / stride + 1
    }
}

/// Grid-aligned `size`×`size` crops taken every `stride` pixels. An image
/// smaller than one patch yields no pairs and a warning.
pub fn extract_patches(
    input: &ImagePlane,
    target: &ImagePlane,
    size: usize,
    stride: usize,
) -> Result<Vec<PatchPair>> {
    input.ensure_same_dims(target, "extract_patches")?;
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "patch size and stride must be positive".into(),
        ));
    }
    let nx = patch_count_along(input.width, size, stride);
    let ny = patch_count_along(input.height, size, stride);
    if nx == 0 || ny == 0 {
        log::warn!(
            "{}x{} image is smaller than a {size}x{size} patch; skipped",
            input.width,
            input.height
        );
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(nx * ny);
    for py in 0..ny {
        for px in 0..nx {
            let (left, top) = (px * stride, py * stride);
            out.push(PatchPair {
                left,
                top,
                input: input.crop(left, top, size, size)?,
                target: target.crop(left, top, size, size)?,
            });
        }
    }
    Ok(out)
}

/// Removes `pixels` rows and columns from every side.
pub fn crop_border(plane: &ImagePlane, pixels: usize) -> Result<ImagePlane> {
    if 2 * pixels >= plane.width.min(plane.height) {
        return Err(Error::InvalidArgument(format!(
            "cannot crop {pixels} pixels from each side of a {}x{} image",
            plane.width, plane.height
        )));
    }
    plane.crop(
        pixels,
        pixels,
        plane.width - 2 * pixels,
        plane.height - 2 * pixels,
    )
}
