//! Stochastic view generation: random resized crop, horizontal flip, color
//! jitter, random grayscale and Gaussian blur, applied in that order.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const CROP_ATTEMPTS: usize = 10;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Bounds on the crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Bounds on the crop aspect ratio (width / height).
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f64, f64),
    pub output_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.3,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.2,
            grayscale_p: 0.2,
            blur_p: 0.2,
            blur_kernel: 3,
            blur_sigma: (1.0, 2.0),
            output_size: 32,
        }
    }
}

impl AugmentConfig {
    /// Crop of the whole image and no stochastic transform: plain resize.
    pub fn identity(output_size: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            output_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ];
        if let Some((name, p)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("AugmentConfig.{name} = {p} outside [0, 1]")));
        }
        let ordered = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !ordered(self.crop_scale) || self.crop_scale.1 > 1.0 {
            return Err(Error::Config("AugmentConfig.crop_scale must satisfy 0 < min <= max <= 1".into()));
        }
        if !ordered(self.crop_ratio) {
            return Err(Error::Config("AugmentConfig.crop_ratio must satisfy 0 < min <= max".into()));
        }
        if !ordered(self.blur_sigma) {
            return Err(Error::Config("AugmentConfig.blur_sigma must satisfy 0 < min <= max".into()));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Config("AugmentConfig.blur_kernel must be odd".into()));
        }
        let strengths = [self.brightness, self.contrast, self.saturation];
        if strengths.iter().any(|s| *s < 0.0) || !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config("AugmentConfig jitter strengths out of range".into()));
        }
        if self.output_size == 0 {
            return Err(Error::Config("AugmentConfig.output_size must be positive".into()));
        }
        Ok(())
    }
}

/// Crop window in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Which stochastic steps fired for one view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentTrace {
    pub crop: CropBox,
    pub flipped: bool,
    /// Brightness, contrast, saturation and hue factors, when jitter fired.
    pub jitter: Option<[f32; 4]>,
    pub grayscaled: bool,
    pub blur_sigma: Option<f32>,
}

/// One augmented `[3, S, S]` view with values in `[0, 1]`.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor<f32> {
    augment_traced(img, cfg, rng).0
}

pub fn augment_traced(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> (Tensor<f32>, AugmentTrace) {
    let s = cfg.output_size;
    let crop = sample_crop(img, cfg, rng);
    let mut planes = resize_crop(img, crop, s);

    let flipped = rng.random_bool(cfg.flip_p);
    if flipped {
        flip_horizontal(&mut planes, s);
    }

    let jitter = if rng.random_bool(cfg.jitter_p) {
        let factor = |r: &mut Rng, strength: f64| -> f32 {
            if strength == 0.0 {
                1.0
            } else {
                r.random_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
            }
        };
        let b = factor(rng, cfg.brightness);
        let c = factor(rng, cfg.contrast);
        let sat = factor(rng, cfg.saturation);
        let h = if cfg.hue == 0.0 {
            0.0
        } else {
            rng.random_range(-cfg.hue..=cfg.hue) as f32
        };
        adjust_brightness(&mut planes, b);
        adjust_contrast(&mut planes, c);
        adjust_saturation(&mut planes, sat);
        adjust_hue(&mut planes, h);
        Some([b, c, sat, h])
    } else {
        None
    };

    let grayscaled = rng.random_bool(cfg.grayscale_p);
    if grayscaled {
        to_grayscale(&mut planes);
    }

    let blur_sigma = if rng.random_bool(cfg.blur_p) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1) as f32;
        gaussian_blur(&mut planes, s, cfg.blur_kernel, sigma);
        Some(sigma)
    } else {
        None
    };

    for v in &mut planes {
        *v = v.clamp(0.0, 1.0);
    }
    let tensor = Tensor::new(vec![3, s, s], planes).expect("planes sized 3*s*s");
    (
        tensor,
        AugmentTrace {
            crop,
            flipped,
            jitter,
            grayscaled,
            blur_sigma,
        },
    )
}

/// Evaluation view: bilinear resize of the full image, nothing random.
pub fn eval_transform(img: &Image, size: usize) -> Tensor<f32> {
    let full = CropBox {
        top: 0,
        left: 0,
        height: img.height,
        width: img.width,
    };
    Tensor::new(vec![3, size, size], resize_crop(img, full, size)).expect("planes sized 3*s*s")
}

/// Stacks `[C, S, S]` views into a `[B, C, S, S]` batch.
pub fn stack(views: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = views.first().ok_or_else(|| Error::contract("cannot stack zero views"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(views.len() * first.len());
    for v in views {
        if v.shape() != shape.as_slice() {
            return Err(Error::dim(format!("stack: {:?} vs {shape:?}", v.shape())));
        }
        data.extend_from_slice(v.data());
    }
    let mut out_shape = vec![views.len()];
    out_shape.extend(shape);
    Tensor::new(out_shape, data)
}

fn sample_crop(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> CropBox {
    let (h, w) = (img.height, img.width);
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    // Center crop, as close to the allowed aspect range as the image permits.
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.crop_ratio.0 {
        ((w as f64 / cfg.crop_ratio.0).round() as usize, w)
    } else if in_ratio > cfg.crop_ratio.1 {
        (h, (h as f64 * cfg.crop_ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    CropBox {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Bilinear (half-pixel centers) resample of the crop into planar floats.
fn resize_crop(img: &Image, crop: CropBox, s: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * s * s];
    let axis = |len: usize, offset: usize| -> Vec<(usize, usize, f32)> {
        (0..s)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * len as f64 / s as f64 - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (offset + lo, offset + hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(crop.height, crop.top);
    let xs = axis(crop.width, crop.left);
    let px = |y: usize, x: usize, c: usize| f32::from(img.pixels[(y * img.width + x) * 3 + c]) / 255.0;
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out[(c * s + oy) * s + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

fn flip_horizontal(planes: &mut [f32], s: usize) {
    for row in planes.chunks_mut(s) {
        row.reverse();
    }
}

fn luminance(planes: &[f32]) -> Vec<f32> {
    let n = planes.len() / 3;
    (0..n)
        .map(|i| LUMA[0] * planes[i] + LUMA[1] * planes[n + i] + LUMA[2] * planes[2 * n + i])
        .collect()
}

fn adjust_brightness(planes: &mut [f32], f: f32) {
    for v in planes.iter_mut() {
        *v = (*v * f).clamp(0.0, 1.0);
    }
}

fn adjust_contrast(planes: &mut [f32], f: f32) {
    let gray = luminance(planes);
    let mean = gray.iter().sum::<f32>() / gray.len() as f32;
    for v in planes.iter_mut() {
        *v = (f * *v + (1.0 - f) * mean).clamp(0.0, 1.0);
    }
}

fn adjust_saturation(planes: &mut [f32], f: f32) {
    let gray = luminance(planes);
    let n = gray.len();
    for (i, v) in planes.iter_mut().enumerate() {
        *v = (f * *v + (1.0 - f) * gray[i % n]).clamp(0.0, 1.0);
    }
}

fn adjust_hue(planes: &mut [f32], shift: f32) {
    if shift == 0.0 {
        return;
    }
    let n = planes.len() / 3;
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(planes[i], planes[n + i], planes[2 * n + i]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        planes[i] = r;
        planes[n + i] = g;
        planes[2 * n + i] = b;
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn to_grayscale(planes: &mut [f32]) {
    let gray = luminance(planes);
    let n = gray.len();
    for c in 0..3 {
        planes[c * n..(c + 1) * n].copy_from_slice(&gray);
    }
}

/// Separable Gaussian blur with reflect padding.
fn gaussian_blur(planes: &mut [f32], s: usize, kernel: usize, sigma: f32) {
    let half = (kernel / 2) as isize;
    let mut weights: Vec<f32> = (-half..=half)
        .map(|x| (-(x * x) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let reflect = |i: isize| -> usize {
        let n = s as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m >= n { period - m } else { m }) as usize
    };
    let mut tmp = vec![0.0f32; s * s];
    for plane in planes.chunks_mut(s * s) {
        for y in 0..s {
            for x in 0..s {
                tmp[y * s + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * plane[y * s + reflect(x as isize + k as isize - half)])
                    .sum();
            }
        }
        for y in 0..s {
            for x in 0..s {
                plane[y * s + x] = weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - half) * s + x])
                    .sum();
            }
        }
    }
}
