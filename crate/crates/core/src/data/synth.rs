//! Procedural ten-class image set in CIFAR-10 layout.
//!
//! Each class is a pattern family (stripe orientations, checkerboard,
//! rings, and four shapes). Colors, frequency, phase, position, size and
//! pixel noise are random per image, so the class is carried only by
//! structure.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::cifar::{write_cifar10, ImageRecord, CLASSES, SIDE, TEST_FILE, TRAIN_FILES};
use crate::error::Result;
use crate::image::Image;
use crate::rng::stream;

pub const CLASS_NAMES: [&str; CLASSES] = [
    "horizontal stripes",
    "vertical stripes",
    "rising diagonals",
    "falling diagonals",
    "checkerboard",
    "rings",
    "disk",
    "square outline",
    "cross",
    "triangle",
];

fn color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Renders one image of `label` from `rng`.
pub fn render<R: Rng>(label: u8, rng: &mut R) -> Image {
    let fg = color(rng);
    let mut bg = color(rng);
    // keep the pattern visible
    if fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f32>() < 0.6 {
        bg = fg.map(|v| 1.0 - v);
    }
    let period: f32 = rng.random_range(4.0..10.0);
    let phase: f32 = rng.random_range(0.0..period);
    let cy: f32 = rng.random_range(10.0..22.0);
    let cx: f32 = rng.random_range(10.0..22.0);
    let size: f32 = rng.random_range(5.0..11.0);
    let thick: f32 = rng.random_range(1.5..3.0);
    let noise: f32 = rng.random_range(0.02..0.12);
    let stripe = |t: f32| ((t + phase) / period * 2.0 * PI).sin() > 0.0;
    let mut img = Image::zeros(SIDE, SIDE, 3);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (fy, fx) = (y as f32, x as f32);
            let (dy, dx) = (fy - cy, fx - cx);
            let on = match label {
                0 => stripe(fy),
                1 => stripe(fx),
                2 => stripe((fx + fy) / std::f32::consts::SQRT_2),
                3 => stripe((fx - fy) / std::f32::consts::SQRT_2),
                4 => stripe(fx) ^ stripe(fy),
                5 => stripe((dx * dx + dy * dy).sqrt()),
                6 => dx * dx + dy * dy <= size * size,
                7 => {
                    let m = dx.abs().max(dy.abs());
                    m <= size && m >= size - thick
                }
                8 => (dx.abs() <= thick && dy.abs() <= size) || (dy.abs() <= thick && dx.abs() <= size),
                _ => dy <= size && dy >= -size && dx.abs() <= (dy + size) / 2.0,
            };
            let base = if on { fg } else { bg };
            for c in 0..3 {
                let n: f32 = rng.random_range(-1.0..1.0) * noise;
                *img.at_mut(y, x, c) = (base[c] + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// `n` records with labels cycling through the classes.
pub fn generate(n: usize, seed: u64) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| {
            let label = (i % CLASSES) as u8;
            let mut rng = stream(seed, &[i as u64]);
            ImageRecord::from_image(label, &render(label, &mut rng))
        })
        .collect()
}

/// Writes a train set split over the five batch files and a test file,
/// all in CIFAR-10 binary layout.
pub fn write_dataset(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records = generate(train, seed);
    let per_file = train.div_ceil(TRAIN_FILES.len()).max(1);
    for (i, name) in TRAIN_FILES.iter().enumerate() {
        let lo = (i * per_file).min(train);
        let hi = ((i + 1) * per_file).min(train);
        if i == 0 || lo < hi {
            write_cifar10(&dir.join(name), &records[lo..hi])?;
        }
    }
    write_cifar10(&dir.join(TEST_FILE), &generate(test, seed ^ 0x5eed_7e57))
}
