use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::{quantize, to_luminance, ImagePlane, PlaneOrigin};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// A decoded image as floating-point planes in `[0, 1]`.
#[derive(Clone, Debug)]
pub enum DecodedImage {
    Gray(ImagePlane),
    Rgb([ImagePlane; 3]),
}

impl DecodedImage {
    /// Luminance plane; grayscale sources are used as-is.
    pub fn luminance(&self) -> Result<ImagePlane> {
        match self {
            DecodedImage::Gray(p) => Ok(p.clone()),
            DecodedImage::Rgb([r, g, b]) => to_luminance(r, g, b),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            DecodedImage::Gray(p) => p.dims(),
            DecodedImage::Rgb([r, _, _]) => r.dims(),
        }
    }
}

pub fn is_supported_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp"))
        .unwrap_or(false)
}

/// PNG/BMP files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_supported_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn load_image(path: &Path) -> Result<DecodedImage> {
    if !is_supported_image(path) {
        return Err(Error::Data(format!(
            "{}: only PNG and BMP images are supported",
            path.display()
        )));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let mut planes: [Vec<f64>; 3] = Default::default();
        for px in rgb.pixels() {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(px.0[c] as f64);
            }
        }
        let [r, g, b] = planes;
        Ok(DecodedImage::Rgb([
            ImagePlane::new(w, h, r, PlaneOrigin::RgbChannel)?,
            ImagePlane::new(w, h, g, PlaneOrigin::RgbChannel)?,
            ImagePlane::new(w, h, b, PlaneOrigin::RgbChannel)?,
        ]))
    } else {
        let gray = img.to_luma32f();
        let samples = gray.pixels().map(|p| p.0[0] as f64).collect();
        Ok(DecodedImage::Gray(ImagePlane::new(
            w,
            h,
            samples,
            PlaneOrigin::Luminance,
        )?))
    }
}

pub fn load_luminance(path: &Path) -> Result<ImagePlane> {
    load_image(path)?.luminance()
}

/// Writes one plane as 8-bit grayscale or three planes as 8-bit RGB PNG.
pub fn save_planes_png(path: &Path, planes: &[&ImagePlane]) -> Result<()> {
    let (w, h) = planes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no planes to save".into()))?
        .dims();
    for p in planes {
        if p.dims() != (w, h) {
            return Err(Error::Dimension("planes to save differ in size".into()));
        }
    }
    let img = match planes {
        [y] => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, y.quantized()).expect("sized buffer"),
        ),
        [r, g, b] => {
            let mut raw = Vec::with_capacity(3 * w * h);
            for i in 0..w * h {
                raw.extend([r, g, b].iter().map(|p| quantize(p.samples()[i])));
            }
            DynamicImage::ImageRgb8(
                RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer"),
            )
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "expected 1 or 3 planes, got {}",
                planes.len()
            )))
        }
    };
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    write_atomic(path, &bytes)
}
