//! Grayscale slice type and PNG I/O.
//!
//! All simulation and quality metrics operate on [`GrayImage`]: a row-major
//! buffer of `f64` intensities in `[0, 1]`. Files on disk are PNG; 8-bit and
//! 16-bit inputs are accepted, output is always 16-bit grayscale.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const U16_MAX: f64 = u16::MAX as f64;
const U8_MAX: f64 = u8::MAX as f64;

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Builds an image, rejecting non-finite or out-of-range values.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        if let Some((i, v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::invalid(format!(
                "pixel {i} has value {v}, expected finite value in [0,1]"
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel. Values are clamped into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                pixels.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn same_dims(&self, other: &GrayImage) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population variance of the intensities.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.pixels.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.pixels.len() as f64
    }
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "zero-dimension image {width}x{height}"
        )));
    }
    if width * height != len {
        return Err(Error::invalid(format!(
            "pixel count {len} does not match {width}x{height}"
        )));
    }
    Ok(())
}

/// Clamps every value into `[0, 1]`. NaN or infinite input is rejected.
pub fn clip01(width: usize, height: usize, values: Vec<f64>) -> Result<GrayImage> {
    check_dims(width, height, values.len())?;
    let mut values = values;
    for (i, v) in values.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::invalid(format!("pixel {i} is not finite ({v})")));
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(GrayImage {
        width,
        height,
        pixels: values,
    })
}

/// Reads a PNG and maps intensities to `[0, 1]` by the bit-depth maximum.
///
/// RGB(A) inputs are collapsed to the unweighted mean of the colour channels;
/// alpha is ignored.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "zero-dimension image".into(),
        });
    }
    let pixels: Vec<f64> = match &decoded {
        DynamicImage::ImageLuma8(b) => b.pixels().map(|p| p.0[0] as f64 / U8_MAX).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f64 / U8_MAX).collect(),
        DynamicImage::ImageLuma16(b) => b.pixels().map(|p| p.0[0] as f64 / U16_MAX).collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f64 / U16_MAX).collect(),
        DynamicImage::ImageRgb8(b) => b.pixels().map(|p| rgb_mean(p.0, U8_MAX)).collect(),
        DynamicImage::ImageRgba8(b) => b
            .pixels()
            .map(|p| rgb_mean([p.0[0], p.0[1], p.0[2]], U8_MAX))
            .collect(),
        DynamicImage::ImageRgb16(b) => b.pixels().map(|p| rgb_mean(p.0, U16_MAX)).collect(),
        DynamicImage::ImageRgba16(b) => b
            .pixels()
            .map(|p| rgb_mean([p.0[0], p.0[1], p.0[2]], U16_MAX))
            .collect(),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: format!("unsupported pixel format {:?}", other.color()),
            })
        }
    };
    GrayImage::new(w, h, pixels)
}

fn rgb_mean<T: Into<f64> + Copy>(c: [T; 3], max: f64) -> f64 {
    (c[0].into() + c[1].into() + c[2].into()) / (3.0 * max)
}

/// Writes a 16-bit grayscale PNG.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data: Vec<u16> = img
        .pixels
        .iter()
        .map(|v| (v * U16_MAX).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, data)
            .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!(
            "target size {width}x{height} must be positive"
        )));
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            out.push(sample_bilinear(img, fx, fy));
        }
    }
    Ok(GrayImage {
        width,
        height,
        pixels: out,
    })
}

/// Bilinear interpolation at an in-bounds fractional coordinate.
pub(crate) fn sample_bilinear(img: &GrayImage, fx: f64, fy: f64) -> f64 {
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let top = img.get(x0, y0) * (1.0 - tx) + img.get(x1, y0) * tx;
    let bottom = img.get(x0, y1) * (1.0 - tx) + img.get(x1, y1) * tx;
    (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0)
}

/// Mirror index without edge repetition (`d c b | a b c d | c b a`).
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}
