//! Stochastic view generation: crops, flips, color distortion, grayscale
//! and blur, assembled into the V1, V2 and multi-crop recipes.
//!
//! Every function is a pure function of its input image and RNG state.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::FloatImage;
use crate::{seed, Error, Result};

const CROP_RETRIES: usize = 10;
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];
/// Blur widths of the reference recipes are quoted for 224-pixel crops.
const REFERENCE_CROP_PX: f64 = 224.0;

fn check_range(name: &str, (lo, hi): (f64, f64), min_exclusive: f64, max: f64) -> Result<()> {
    if !(lo > min_exclusive && lo <= hi && hi <= max) {
        return Err(Error::Config(format!("{name} range ({lo}, {hi}) must lie in ({min_exclusive}, {max}]")));
    }
    Ok(())
}

/// Crops a random region covering an area fraction in `scale` with aspect
/// ratio log-uniform in `ratio`, then resizes it to `out_px × out_px`.
/// After 10 failed draws the largest centered crop within `ratio` is used.
pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &FloatImage,
    scale: (f64, f64),
    ratio: (f64, f64),
    out_px: usize,
    rng: &mut R,
) -> Result<FloatImage> {
    check_range("crop scale", scale, 0.0, 1.0)?;
    check_range("crop aspect", ratio, 0.0, f64::INFINITY)?;
    if img.width() < 8 || img.height() < 8 || out_px == 0 {
        return Err(Error::Validation(format!("cannot crop {}x{} to {out_px}", img.width(), img.height())));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let area = w * h;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..CROP_RETRIES {
        let target = area * rng.gen_range(scale.0..=scale.1);
        let aspect = rng.gen_range(log_lo..=log_hi).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = rng.gen_range(0..=(w - cw) as usize) as f64;
            let y0 = rng.gen_range(0..=(h - ch) as usize) as f64;
            return Ok(img.resample_region(x0, y0, cw, ch, out_px, out_px));
        }
    }
    let in_ratio = w / h;
    let (cw, ch) = if in_ratio < ratio.0 {
        (w, (w / ratio.0).round())
    } else if in_ratio > ratio.1 {
        ((h * ratio.1).round(), h)
    } else {
        (w, h)
    };
    Ok(img.resample_region(((w - cw) / 2.0).floor(), ((h - ch) / 2.0).floor(), cw, ch, out_px, out_px))
}

pub fn hflip(img: &FloatImage) -> FloatImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    let src = img.data();
    let dst = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (s, d) = ((y * w + x) * 3, (y * w + (w - 1 - x)) * 3);
            dst[d..d + 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}

pub fn vflip(img: &FloatImage) -> FloatImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    let row = w * 3;
    for y in 0..h {
        out.data_mut()[(h - 1 - y) * row..(h - y) * row].copy_from_slice(&img.data()[y * row..(y + 1) * row]);
    }
    out
}

fn luma(p: &[f32]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

fn clamp_all(img: &mut FloatImage) {
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

pub fn adjust_brightness(img: &FloatImage, factor: f32) -> FloatImage {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
    out
}

/// Blends towards the mean luma of the whole image.
pub fn adjust_contrast(img: &FloatImage, factor: f32) -> FloatImage {
    let n = (img.width() * img.height()) as f64;
    let mean = (img.data().chunks_exact(3).map(|p| luma(p) as f64).sum::<f64>() / n) as f32;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0);
    }
    out
}

/// Blends each pixel towards its own luma.
pub fn adjust_saturation(img: &FloatImage, factor: f32) -> FloatImage {
    let mut out = img.clone();
    for p in out.data_mut().chunks_exact_mut(3) {
        let g = luma(p);
        for v in p {
            *v = (g + factor * (*v - g)).clamp(0.0, 1.0);
        }
    }
    out
}

fn rgb_to_hsv(p: &[f32]) -> (f32, f32, f32) {
    let (r, g, b) = (p[0], p[1], p[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `shift` turns (in [-0.5, 0.5]).
pub fn adjust_hue(img: &FloatImage, shift: f32) -> FloatImage {
    let mut out = img.clone();
    for p in out.data_mut().chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(p);
        let rgb = hsv_to_rgb(h + shift, s, v);
        for (d, s) in p.iter_mut().zip(rgb) {
            *d = s.clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ColorJitter {
    pub fn new(brightness: f64, contrast: f64, saturation: f64, hue: f64) -> Result<Self> {
        let j = ColorJitter { brightness, contrast, saturation, hue };
        j.validate()?;
        Ok(j)
    }

    pub fn validate(&self) -> Result<()> {
        let s = [self.brightness, self.contrast, self.saturation, self.hue];
        if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.hue > 0.5 {
            return Err(Error::Config(format!("invalid color jitter strengths {self:?}")));
        }
        Ok(())
    }
}

fn factor<R: Rng + ?Sized>(strength: f64, rng: &mut R) -> f32 {
    rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
}

/// Applies brightness, contrast, saturation and hue perturbations in a
/// random order. Zero-strength components are skipped.
pub fn color_jitter<R: Rng + ?Sized>(img: &FloatImage, jitter: &ColorJitter, rng: &mut R) -> FloatImage {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 if jitter.brightness > 0.0 => adjust_brightness(&out, factor(jitter.brightness, rng)),
            1 if jitter.contrast > 0.0 => adjust_contrast(&out, factor(jitter.contrast, rng)),
            2 if jitter.saturation > 0.0 => adjust_saturation(&out, factor(jitter.saturation, rng)),
            3 if jitter.hue > 0.0 => adjust_hue(&out, rng.gen_range(-jitter.hue..=jitter.hue) as f32),
            _ => continue,
        };
    }
    clamp_all(&mut out);
    out
}

pub fn grayscale(img: &FloatImage) -> FloatImage {
    let mut out = img.clone();
    for p in out.data_mut().chunks_exact_mut(3) {
        let g = luma(p);
        p.fill(g);
    }
    out
}

pub fn random_grayscale<R: Rng + ?Sized>(img: &FloatImage, p: f64, rng: &mut R) -> FloatImage {
    if rng.gen::<f64>() < p {
        grayscale(img)
    } else {
        img.clone()
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn blur(img: &FloatImage, sigma: f64) -> FloatImage {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pass = |src: &FloatImage, horizontal: bool| -> FloatImage {
        let mut out = src.clone();
        let s = src.data();
        let d = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (j, kw) in k.iter().enumerate() {
                    let o = j as i64 - r;
                    let (sx, sy) = if horizontal { ((x + o).clamp(0, w - 1), y) } else { (x, (y + o).clamp(0, h - 1)) };
                    let i = ((sy * w + sx) * 3) as usize;
                    for c in 0..3 {
                        acc[c] += kw * s[i + c];
                    }
                }
                let i = ((y * w + x) * 3) as usize;
                d[i..i + 3].copy_from_slice(&acc);
            }
        }
        out
    };
    let mut out = pass(&pass(img, true), false);
    clamp_all(&mut out);
    out
}

pub fn gaussian_blur<R: Rng + ?Sized>(img: &FloatImage, sigma: (f64, f64), rng: &mut R) -> Result<FloatImage> {
    check_range("blur sigma", sigma, 0.0, 5.0)?;
    Ok(blur(img, rng.gen_range(sigma.0..=sigma.1)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    V1,
    V2,
    DinoGlobal,
    DinoLocal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    HorizontalFlip { p: f64 },
    VerticalFlip { p: f64 },
    ColorJitter { p: f64, jitter: ColorJitter },
    Grayscale { p: f64 },
    GaussianBlur { p: f64, sigma: (f64, f64) },
}

/// A random resized crop to `output_size` followed by `ops` in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub recipe: Recipe,
    pub output_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub ops: Vec<AugOp>,
}

const ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

fn blur_sigma(output_size: usize) -> (f64, f64) {
    let s = output_size as f64 / REFERENCE_CROP_PX;
    (0.1 * s, 2.0 * s)
}

impl AugmentationPipeline {
    /// Crop, flip, color jitter at strength 0.4 and 20% grayscale.
    pub fn v1(output_size: usize) -> Self {
        AugmentationPipeline {
            recipe: Recipe::V1,
            output_size,
            crop_scale: (0.2, 1.0),
            crop_ratio: ASPECT,
            ops: vec![
                AugOp::Grayscale { p: 0.2 },
                AugOp::ColorJitter { p: 1.0, jitter: ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4, hue: 0.4 } },
                AugOp::HorizontalFlip { p: 0.5 },
            ],
        }
    }

    /// V1 plus blur, with jitter applied 80% of the time and a smaller hue shift.
    pub fn v2(output_size: usize) -> Self {
        AugmentationPipeline {
            recipe: Recipe::V2,
            output_size,
            crop_scale: (0.2, 1.0),
            crop_ratio: ASPECT,
            ops: vec![
                AugOp::ColorJitter { p: 0.8, jitter: ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.4, hue: 0.1 } },
                AugOp::Grayscale { p: 0.2 },
                AugOp::GaussianBlur { p: 0.5, sigma: blur_sigma(output_size) },
                AugOp::HorizontalFlip { p: 0.5 },
            ],
        }
    }

    fn dino(recipe: Recipe, output_size: usize, crop_scale: (f64, f64)) -> Self {
        AugmentationPipeline {
            recipe,
            output_size,
            crop_scale,
            crop_ratio: ASPECT,
            ops: vec![
                AugOp::HorizontalFlip { p: 0.5 },
                AugOp::ColorJitter { p: 0.8, jitter: ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.2, hue: 0.1 } },
                AugOp::Grayscale { p: 0.2 },
                AugOp::GaussianBlur { p: 0.5, sigma: blur_sigma(output_size) },
            ],
        }
    }

    pub fn dino_global(output_size: usize) -> Self {
        Self::dino(Recipe::DinoGlobal, output_size, (0.4, 1.0))
    }

    pub fn dino_local(output_size: usize) -> Self {
        Self::dino(Recipe::DinoLocal, output_size, (0.05, 0.4))
    }

    /// Full-image crop and no stochastic ops.
    pub fn identity(output_size: usize) -> Self {
        AugmentationPipeline { recipe: Recipe::V1, output_size, crop_scale: (1.0, 1.0), crop_ratio: (1.0, 1.0), ops: vec![] }
    }

    pub fn for_recipe(recipe: Recipe, output_size: usize) -> Self {
        match recipe {
            Recipe::V1 => Self::v1(output_size),
            Recipe::V2 => Self::v2(output_size),
            Recipe::DinoGlobal => Self::dino_global(output_size),
            Recipe::DinoLocal => Self::dino_local(output_size),
        }
    }

    pub fn without_color(mut self) -> Self {
        self.ops.retain(|op| !matches!(op, AugOp::ColorJitter { .. } | AugOp::Grayscale { .. }));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        check_range("crop scale", self.crop_scale, 0.0, 1.0)?;
        check_range("crop aspect", self.crop_ratio, 0.0, f64::INFINITY)?;
        for op in &self.ops {
            let p = match op {
                AugOp::HorizontalFlip { p } | AugOp::VerticalFlip { p } | AugOp::Grayscale { p } => *p,
                AugOp::ColorJitter { p, jitter } => {
                    jitter.validate()?;
                    *p
                }
                AugOp::GaussianBlur { p, sigma } => {
                    check_range("blur sigma", *sigma, 0.0, 5.0)?;
                    *p
                }
            };
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, img: &FloatImage, rng: &mut R) -> Result<FloatImage> {
        let mut out = random_resized_crop(img, self.crop_scale, self.crop_ratio, self.output_size, rng)?;
        for op in &self.ops {
            out = match op {
                AugOp::HorizontalFlip { p } => {
                    if rng.gen::<f64>() < *p { hflip(&out) } else { out }
                }
                AugOp::VerticalFlip { p } => {
                    if rng.gen::<f64>() < *p { vflip(&out) } else { out }
                }
                AugOp::ColorJitter { p, jitter } => {
                    if rng.gen::<f64>() < *p { color_jitter(&out, jitter, rng) } else { out }
                }
                AugOp::Grayscale { p } => random_grayscale(&out, *p, rng),
                AugOp::GaussianBlur { p, sigma } => {
                    if rng.gen::<f64>() < *p { gaussian_blur(&out, *sigma, rng)? } else { out }
                }
            };
        }
        clamp_all(&mut out);
        Ok(out)
    }
}

/// How many views to draw per image and with which pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewRecipe {
    Pair { pipeline: AugmentationPipeline },
    MultiCrop { global: AugmentationPipeline, local: AugmentationPipeline, n_local: usize },
}

impl ViewRecipe {
    pub fn pair(pipeline: AugmentationPipeline) -> Self {
        ViewRecipe::Pair { pipeline }
    }

    /// Two global crops at `global_px` and `n_local` local crops at `local_px`.
    pub fn multi_crop(global_px: usize, local_px: usize, n_local: usize) -> Self {
        ViewRecipe::MultiCrop {
            global: AugmentationPipeline::dino_global(global_px),
            local: AugmentationPipeline::dino_local(local_px),
            n_local,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ViewRecipe::Pair { pipeline } => pipeline.validate(),
            ViewRecipe::MultiCrop { global, local, .. } => {
                global.validate()?;
                local.validate()?;
                if local.output_size >= global.output_size {
                    return Err(Error::Config("local crops must be smaller than global crops".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub global: Vec<FloatImage>,
    pub local: Vec<FloatImage>,
}

pub fn make_views<R: Rng + ?Sized>(img: &FloatImage, recipe: &ViewRecipe, rng: &mut R) -> Result<Views> {
    match recipe {
        ViewRecipe::Pair { pipeline } => {
            let a = pipeline.apply(img, rng)?;
            let b = pipeline.apply(img, rng)?;
            Ok(Views { global: vec![a, b], local: Vec::new() })
        }
        ViewRecipe::MultiCrop { global, local, n_local } => {
            let g = (0..2).map(|_| global.apply(img, rng)).collect::<Result<Vec<_>>>()?;
            let l = (0..*n_local).map(|_| local.apply(img, rng)).collect::<Result<Vec<_>>>()?;
            Ok(Views { global: g, local: l })
        }
    }
}

/// Views for a batch; image `i` draws from its own substream of `seed`, so
/// results do not depend on batch composition or evaluation order.
pub fn batch_views(images: &[FloatImage], recipe: &ViewRecipe, seed: u64) -> Result<Vec<Views>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| make_views(img, recipe, &mut seed::substream(seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> FloatImage {
        let data = (0..w * h * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        FloatImage::new(w, h, data).unwrap()
    }

    #[test]
    fn full_crop_is_plain_resize() {
        let img = ramp(40, 40);
        let mut r = seed::substream(1, 0);
        let out = random_resized_crop(&img, (1.0, 1.0), (1.0, 1.0), 20, &mut r).unwrap();
        assert_eq!(out, img.resize(20, 20));
    }

    #[test]
    fn crop_falls_back_to_center() {
        let img = ramp(64, 16);
        let mut r = seed::substream(1, 0);
        let out = random_resized_crop(&img, (1.0, 1.0), (1.0, 1.0), 8, &mut r).unwrap();
        assert_eq!(out, img.resample_region(24.0, 0.0, 16.0, 16.0, 8, 8));
        assert!(random_resized_crop(&ramp(4, 4), (0.5, 1.0), ASPECT, 8, &mut r).is_err());
        assert!(random_resized_crop(&img, (0.0, 1.0), ASPECT, 8, &mut r).is_err());
    }

    #[test]
    fn brightness_doubles_gray() {
        let out = adjust_brightness(&FloatImage::filled(4, 4, [0.25; 3]), 2.0);
        assert!(out.data().iter().all(|&v| v == 0.5));
        let out = adjust_brightness(&FloatImage::filled(4, 4, [0.75; 3]), 2.0);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_jitter_is_identity() {
        let img = ramp(9, 7);
        let j = ColorJitter::new(0.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(color_jitter(&img, &j, &mut seed::substream(3, 0)), img);
        assert!(ColorJitter::new(0.1, 0.1, 0.1, 0.6).is_err());
    }

    #[test]
    fn hue_round_trip() {
        let img = ramp(6, 6);
        let out = adjust_hue(&img, 0.0);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let red = FloatImage::filled(1, 1, [1.0, 0.0, 0.0]);
        let green = adjust_hue(&red, 1.0 / 3.0);
        assert!((green.get(0, 0, 1) - 1.0).abs() < 1e-6 && green.get(0, 0, 0).abs() < 1e-6);
    }

    #[test]
    fn grayscale_luma() {
        let mut r = seed::substream(0, 0);
        let out = random_grayscale(&FloatImage::filled(2, 2, [1.0, 0.0, 0.0]), 1.0, &mut r);
        assert!(out.data().iter().all(|&v| (v - 0.299).abs() < 1e-7));
        let gray = FloatImage::filled(2, 2, [0.4; 3]);
        let out = random_grayscale(&gray, 1.0, &mut r);
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let img = ramp(5, 5);
        assert_eq!(random_grayscale(&img, 0.0, &mut r), img);
    }

    #[test]
    fn kernel_is_normalized() {
        for sigma in [0.1, 0.7, 2.0, 5.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len(), 2 * (3.0f64 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn recipes_validate() {
        for r in [Recipe::V1, Recipe::V2, Recipe::DinoGlobal, Recipe::DinoLocal] {
            AugmentationPipeline::for_recipe(r, 32).validate().unwrap();
        }
        ViewRecipe::multi_crop(32, 16, 4).validate().unwrap();
        assert!(ViewRecipe::multi_crop(16, 16, 4).validate().is_err());
    }

    #[test]
    fn pipeline_serde_round_trip() {
        let p = AugmentationPipeline::v2(32);
        let back: AugmentationPipeline = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
    }
}
