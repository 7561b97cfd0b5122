//! Procedural labelled textures for desk-scale pre-training runs.

use std::f64::consts::PI;

use rand::Rng;

use crate::degrade::{child_seed, rng_from_seed};
use crate::error::{invalid, Result};
use crate::image::ImageTensor;

pub const TOY_CLASSES: usize = 10;

pub const TOY_CLASS_NAMES: [&str; TOY_CLASSES] = [
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "antidiagonal_stripes",
    "checkerboard",
    "rings",
    "dots",
    "sectors",
    "ramp",
    "blocks",
];

/// Labelled images held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

impl ToyDataset {
    /// `per_class` samples of each class at `size × size`, interleaved by
    /// class. Sample `i` depends only on `(seed, i)`.
    pub fn generate(per_class: usize, size: usize, seed: u64) -> Result<Self> {
        if per_class == 0 || size < 4 {
            return Err(invalid!("toy dataset needs per_class > 0 and size >= 4"));
        }
        let n = per_class * TOY_CLASSES;
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % TOY_CLASSES;
            images.push(texture(label, size, child_seed(seed, i as u64))?);
            labels.push(label);
        }
        Ok(ToyDataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn colour(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
}

/// Renders one sample of class `label`. Period, phase, small rotation and
/// the two colours are random.
pub fn texture(label: usize, size: usize, seed: u64) -> Result<ImageTensor> {
    if label >= TOY_CLASSES {
        return Err(invalid!("toy class {label} out of range"));
    }
    let mut rng = rng_from_seed(seed);
    let fg = colour(&mut rng);
    let mut bg = colour(&mut rng);
    // Keep the two colours visibly apart.
    if fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() < 0.6 {
        bg = fg.map(|v| 1.0 - v);
    }
    let period: f64 = rng.random_range(5.0..10.0);
    let phase: f64 = rng.random_range(0.0..1.0);
    let jitter: f64 = rng.random_range(-0.15..0.15);
    let cx: f64 = rng.random_range(0.3..0.7) * size as f64;
    let cy: f64 = rng.random_range(0.3..0.7) * size as f64;
    let blocks: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();

    let stripe = |u: f64| if (u / period + phase).rem_euclid(1.0) < 0.5 { 1.0 } else { 0.0 };
    let along = |x: f64, y: f64, angle: f64| x * angle.cos() + y * angle.sin();

    let mask = |y: usize, x: usize| -> f64 {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        match label {
            0 => stripe(along(xf, yf, PI / 2.0 + jitter)),
            1 => stripe(along(xf, yf, jitter)),
            2 => stripe(along(xf, yf, PI / 4.0 + jitter)),
            3 => stripe(along(xf, yf, -PI / 4.0 + jitter)),
            4 => {
                let a = stripe(along(xf, yf, jitter));
                let b = stripe(along(xf, yf, PI / 2.0 + jitter));
                if (a > 0.5) ^ (b > 0.5) {
                    1.0
                } else {
                    0.0
                }
            }
            5 => stripe(((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt()),
            6 => {
                let p = period + 2.0;
                let (dx, dy) = (
                    (xf / p + phase).rem_euclid(1.0) - 0.5,
                    (yf / p + phase).rem_euclid(1.0) - 0.5,
                );
                if (dx * dx + dy * dy).sqrt() < 0.3 {
                    1.0
                } else {
                    0.0
                }
            }
            7 => {
                let theta = (yf - cy).atan2(xf - cx) + PI + jitter;
                if (theta / (PI / 4.0) + phase).rem_euclid(2.0) < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            8 => {
                let u = along(xf, yf, jitter * 10.0) / size as f64;
                u.clamp(0.0, 1.0)
            }
            _ => {
                let cell = (size / 4).max(1);
                let (bx, by) = ((x / cell).min(7), (y / cell).min(7));
                blocks[by * 8 + bx]
            }
        }
    };

    ImageTensor::from_fn(size, size, 3, |y, x, c| {
        let t = mask(y, x);
        (t * fg[c] + (1.0 - t) * bg[c]) as f32
    })
}
