//! Procedural image datasets used as a source/target pair with a domain shift.
//!
//! * Source ("A"): 4 classes of colored Gaussian blobs on a noisy background.
//!   The class is the blob color.
//! * Target ("B"): 6 imbalanced classes of textures and shapes in muted,
//!   slightly tinted tones. The class is the pattern; geometry (period,
//!   phase, position, size) varies per image.

use std::f32::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetHandle, Image, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const SOURCE_CLASSES: usize = 4;
pub const TARGET_CLASSES: usize = 6;

/// Relative frequency of each target class.
pub const TARGET_CLASS_WEIGHTS: [f64; TARGET_CLASSES] = [0.24, 0.20, 0.18, 0.16, 0.12, 0.10];

const SOURCE_COLORS: [[f32; 3]; SOURCE_CLASSES] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.8, 0.2],
    [0.15, 0.3, 0.95],
    [0.95, 0.85, 0.1],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    Source,
    Target,
}

impl Distribution {
    pub fn num_classes(self) -> usize {
        match self {
            Distribution::Source => SOURCE_CLASSES,
            Distribution::Target => TARGET_CLASSES,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Distribution::Source => "synthetic-source",
            Distribution::Target => "synthetic-target",
        }
    }
}

/// `n` images of `size`×`size` with labels. Image `i` depends only on
/// `(seed, split, i)`.
pub fn generate(dist: Distribution, n: usize, size: usize, split: Split, seed: u64) -> Result<DatasetHandle> {
    if size < 4 {
        return Err(Error::contract("synthetic images need at least 4 pixels per side"));
    }
    let split_id = split as u64;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = rng::stream(seed, dist.label(), &[split_id, i as u64]);
        let (img, label) = match dist {
            Distribution::Source => source_image(&mut r, size),
            Distribution::Target => target_image(&mut r, size),
        };
        images.push(img);
        labels.push(label);
    }
    DatasetHandle::from_parts(dist.label(), split, images, Some(labels), Some(dist.num_classes()))
}

struct Canvas {
    size: usize,
    px: Vec<f32>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            px: vec![0.0; size * size * 3],
        }
    }

    fn fill_noise(&mut self, r: &mut Rng, base: [f32; 3], amp: f32) {
        for p in self.px.chunks_mut(3) {
            let n = r.random_range(-amp..=amp);
            for c in 0..3 {
                p[c] = base[c] + n;
            }
        }
    }

    fn blend(&mut self, y: usize, x: usize, color: [f32; 3], alpha: f32) {
        let i = (y * self.size + x) * 3;
        for c in 0..3 {
            self.px[i + c] = self.px[i + c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn into_image(self) -> Image {
        let pixels = self
            .px
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Image::new(self.size, self.size, pixels).expect("canvas sized")
    }
}

fn jitter_color(r: &mut Rng, c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| (v + r.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn tinted_gray(r: &mut Rng, lo: f32, hi: f32) -> [f32; 3] {
    let level = r.random_range(lo..hi);
    jitter_color(r, [level; 3], 0.05)
}

fn source_image(r: &mut Rng, size: usize) -> (Image, usize) {
    let label = r.random_range(0..SOURCE_CLASSES);
    let mut canvas = Canvas::new(size);
    let bg = r.random_range(0.2..0.6);
    canvas.fill_noise(r, [bg; 3], 0.08);
    let color = jitter_color(r, SOURCE_COLORS[label], 0.1);
    let s = size as f32;
    let blobs = r.random_range(1..=3);
    for _ in 0..blobs {
        let cy = r.random_range(0.2 * s..0.8 * s);
        let cx = r.random_range(0.2 * s..0.8 * s);
        let sigma = r.random_range(0.08 * s..0.2 * s);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let a = (-d2 / (2.0 * sigma * sigma)).exp();
                canvas.blend(y, x, color, a);
            }
        }
    }
    (canvas.into_image(), label)
}

fn weighted_class(r: &mut Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (c, w) in TARGET_CLASS_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    TARGET_CLASSES - 1
}

fn target_image(r: &mut Rng, size: usize) -> (Image, usize) {
    let label = weighted_class(r);
    let mut canvas = Canvas::new(size);
    let bg = tinted_gray(r, 0.1, 0.45);
    canvas.fill_noise(r, bg, 0.12);
    let fg = tinted_gray(r, 0.6, 0.95);
    let s = size as f32;
    let period = r.random_range(0.15 * s..0.3 * s);
    let phase = r.random_range(0.0..2.0 * PI);
    let cy = r.random_range(0.3 * s..0.7 * s);
    let cx = r.random_range(0.3 * s..0.7 * s);
    let radius = r.random_range(0.18 * s..0.3 * s);
    let tilt = r.random_range(-0.2f32..0.2);
    let k = 2.0 * PI / period;
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f32, x as f32);
            let a = match label {
                // horizontal stripes
                0 => wave(k * (fy + tilt * fx) + phase),
                // vertical stripes
                1 => wave(k * (fx + tilt * fy) + phase),
                // checkerboard
                2 => wave(k * fy + phase) * wave(k * fx + phase) + (1.0 - wave(k * fy + phase)) * (1.0 - wave(k * fx + phase)),
                // filled disc
                3 => edge(radius - ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt()),
                // ring
                4 => {
                    let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
                    edge(0.12 * s - (d - radius).abs())
                }
                // diagonal stripes
                _ => wave(k * (fx + fy) / 2f32.sqrt() + phase),
            };
            canvas.blend(y, x, fg, a);
        }
    }
    (canvas.into_image(), label)
}

/// Soft square wave.
fn wave(t: f32) -> f32 {
    (0.5 + 2.0 * t.sin()).clamp(0.0, 1.0)
}

/// Antialiased step: 1 inside (positive distance), 0 outside.
fn edge(dist: f32) -> f32 {
    (dist + 0.5).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_labeled() {
        let a = generate(Distribution::Target, 40, 16, Split::Train, 3).unwrap();
        let b = generate(Distribution::Target, 40, 16, Split::Train, 3).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.image(7), b.image(7));
        assert_eq!(a.num_classes(), 6);
        let val = generate(Distribution::Target, 40, 16, Split::Val, 3).unwrap();
        assert_ne!(val.image(0), a.image(0));
    }

    #[test]
    fn target_classes_are_imbalanced_and_all_present() {
        let ds = generate(Distribution::Target, 2000, 8, Split::Train, 1).unwrap();
        let counts = ds.class_counts();
        assert!(counts.iter().all(|&c| c > 0));
        assert!(counts[0] > counts[5]);
        let src = generate(Distribution::Source, 400, 8, Split::Train, 1).unwrap();
        assert!(src.class_counts().iter().all(|&c| c > 50));
    }
}
