//! 8-bit RGB rasters and their `[0, 1]` float counterparts.

use std::path::Path;

use image::{ImageFormat, RgbImage};
use urbanssl_nn::Tensor;

use crate::{Error, Result};

pub type Rgb = [u8; 3];

/// Row-major 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("image dimensions must be positive".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Validation(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        let pixels = color.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn iter_pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.pixels.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Validation("raster buffer size".into()))?;
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        Image::new(img.width() as usize, img.height() as usize, img.into_raw())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Image::from_png_bytes(&std::fs::read(path)?)
    }
}

/// Row-major HWC float raster with 3 channels, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Validation(format!("bad float raster {width}x{height} with {} values", data.len())));
        }
        Ok(FloatImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Self {
        let data = color.iter().copied().cycle().take(width * height * 3).collect();
        FloatImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn to_image(&self) -> Image {
        let pixels = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Image { width: self.width, height: self.height, pixels }
    }

    /// Bilinear resampling of the region `[x0, x0+w) × [y0, y0+h)` (pixel
    /// units, half-pixel centers, edge-clamped) onto an `out_w × out_h` grid.
    /// No antialiasing filter is applied.
    pub fn resample_region(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> FloatImage {
        let mut data = vec![0.0f32; out_w * out_h * 3];
        let sx = w / out_w as f64;
        let sy = h / out_h as f64;
        let taps = |src: f64, len: usize| -> (usize, usize, f32) {
            let s = src.clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (s - i0 as f64) as f32)
        };
        for oy in 0..out_h {
            let (y_0, y_1, fy) = taps(y0 + (oy as f64 + 0.5) * sy - 0.5, self.height);
            for ox in 0..out_w {
                let (x_0, x_1, fx) = taps(x0 + (ox as f64 + 0.5) * sx - 0.5, self.width);
                for c in 0..3 {
                    let p00 = self.get(x_0, y_0, c);
                    let p01 = self.get(x_1, y_0, c);
                    let p10 = self.get(x_0, y_1, c);
                    let p11 = self.get(x_1, y_1, c);
                    let top = if fx == 0.0 { p00 } else { p00 * (1.0 - fx) + p01 * fx };
                    let bot = if fx == 0.0 { p10 } else { p10 * (1.0 - fx) + p11 * fx };
                    data[(oy * out_w + ox) * 3 + c] = if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy };
                }
            }
        }
        FloatImage { width: out_w, height: out_h, data }
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> FloatImage {
        self.resample_region(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }

    /// Largest centered square, resized to `size × size`.
    pub fn center_square(&self, size: usize) -> FloatImage {
        let side = self.width.min(self.height) as f64;
        let x0 = (self.width as f64 - side) / 2.0;
        let y0 = (self.height as f64 - side) / 2.0;
        self.resample_region(x0, y0, side, side, size, size)
    }
}

/// Stacks equally sized images into a `[B, H, W, 3]` tensor.
pub fn images_to_tensor(images: &[FloatImage]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::Validation("cannot batch zero images".into()));
    };
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::Validation(format!(
                "batch mixes {}x{} and {}x{} images",
                w, h, img.width, img.height
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(&[images.len(), h, w, 3], data)?)
}
