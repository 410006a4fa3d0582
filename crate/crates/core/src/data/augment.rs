//! Simple and complex view pipelines.
//!
//! Simple: random resized crop, horizontal flip, standardization.
//! Complex: the same crop and flip, then color jitter, grayscale, gaussian
//! blur and solarization, then standardization. Crop and flip are always
//! drawn first, so with every extra probability at zero both pipelines
//! produce the same view from the same stream.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// CIFAR-10 training-set channel statistics.
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f32; 2],
    pub solarize_p: f64,
    pub solarize_threshold: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: [0.1, 2.0],
            solarize_p: 0.2,
            solarize_threshold: 0.5,
            mean: CIFAR_MEAN,
            std: CIFAR_STD,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.crop_scale;
        let [r0, r1] = self.crop_ratio;
        let probs = [self.flip_p, self.jitter_p, self.grayscale_p, self.blur_p, self.solarize_p];
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) || !(0.0 < r0 && r0 <= r1) {
            return Err(Error::config("crop scale must satisfy 0 < lo <= hi <= 1 and ratio 0 < lo <= hi"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("augmentation probabilities must lie in [0, 1]"));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("standardization std must be positive"));
        }
        if !(0.0 < self.blur_sigma[0] && self.blur_sigma[0] <= self.blur_sigma[1]) {
            return Err(Error::config("blur sigma range must be positive and ordered"));
        }
        Ok(())
    }
}

/// Crop window in source pixels plus the flip decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

/// Area fraction and log-uniform aspect ratio, ten attempts, then a
/// center crop clamped to the ratio range.
pub fn sample_crop<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, cfg: &AugmentConfig) -> CropParams {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio[0].ln(), cfg.crop_ratio[1].ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            window = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, height, width) = window.unwrap_or_else(|| {
        let in_ratio = w as f64 / h as f64;
        let (ch, cw) = if in_ratio < cfg.crop_ratio[0] {
            ((w as f64 / cfg.crop_ratio[0]).round() as usize, w)
        } else if in_ratio > cfg.crop_ratio[1] {
            (h, (h as f64 * cfg.crop_ratio[1]).round() as usize)
        } else {
            (h, w)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    });
    let flip = rng.random_bool(cfg.flip_p);
    CropParams {
        top,
        left,
        height,
        width,
        flip,
    }
}

/// Bilinear resample of the crop window to `out_h x out_w` (half-pixel
/// centers, edges clamped), mirrored if `crop.flip`.
pub fn resized_crop(img: &Image, crop: &CropParams, out_h: usize, out_w: usize) -> Image {
    let c = img.channels;
    let mut out = Image::zeros(out_h, out_w, c);
    let sy = crop.height as f64 / out_h as f64;
    let sx = crop.width as f64 / out_w as f64;
    let axis = |i: usize, s: f64, len: usize| {
        let p = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, crop.height);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, sx, crop.width);
            let dst_x = if crop.flip { out_w - 1 - x } else { x };
            for ch in 0..c {
                let p = |yy: usize, xx: usize| img.at(crop.top + yy, crop.left + xx, ch);
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                *out.at_mut(y, dst_x, ch) = top + (bottom - top) * fy;
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                *out.at_mut(y, img.width - 1 - x, c) = img.at(y, x, c);
            }
        }
    }
    out
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.data.chunks_exact_mut(3) {
        let l = luma(px[0], px[1], px[2]);
        px.fill(l);
    }
    out
}

fn blend(img: &mut Image, other: impl Fn(usize) -> f32, factor: f32) {
    for (i, v) in img.data.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

pub fn adjust_brightness(img: &mut Image, factor: f32) {
    blend(img, |_| 0.0, factor);
}

pub fn adjust_contrast(img: &mut Image, factor: f32) {
    let n = (img.height * img.width) as f32;
    let mean = img.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / n;
    blend(img, |_| mean, factor);
}

pub fn adjust_saturation(img: &mut Image, factor: f32) {
    let gray = grayscale(img);
    blend(img, |i| gray.data[i], factor);
}

/// Rotates hue by `shift` turns.
pub fn adjust_hue(img: &mut Image, shift: f32) {
    for px in img.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        px.copy_from_slice(&[r, g, b]);
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
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

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable gaussian blur, radius `ceil(3 sigma)`, mirrored borders.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, img.height.min(img.width) - 1);
    let kernel: Vec<f32> = {
        let k: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                (-d * d / (2.0 * sigma as f64 * sigma as f64)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter().map(|v| (v / s) as f32).collect()
    };
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let j = if i < 0 { -i } else if i >= len { 2 * len - 2 - i } else { i };
        j as usize
    };
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::zeros(src.height, src.width, src.channels);
        for y in 0..src.height {
            for x in 0..src.width {
                for c in 0..src.channels {
                    let mut acc = 0.0;
                    for (k, w) in kernel.iter().enumerate() {
                        let off = k as isize - radius as isize;
                        acc += w * if horizontal {
                            src.at(y, reflect(x as isize + off, src.width), c)
                        } else {
                            src.at(reflect(y as isize + off, src.height), x, c)
                        };
                    }
                    *out.at_mut(y, x, c) = acc;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// `x -> 1 - x` for every value at or above `threshold`.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().filter(|v| **v >= threshold).for_each(|v| *v = 1.0 - *v);
    out
}

pub fn standardize(img: &mut Image, mean: &[f32; 3], std: &[f32; 3]) {
    for px in img.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
}

fn crop_and_flip<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let crop = sample_crop(rng, img.height, img.width, cfg);
    resized_crop(img, &crop, img.height, img.width)
}

pub fn simple_augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut out = crop_and_flip(img, cfg, rng);
    standardize(&mut out, &cfg.mean, &cfg.std);
    out
}

pub fn complex_augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let mut out = crop_and_flip(img, cfg, rng);
    if rng.random_bool(cfg.jitter_p) {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 => adjust_brightness(&mut out, rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness)),
                1 => adjust_contrast(&mut out, rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)),
                2 => adjust_saturation(&mut out, rng.random_range(1.0 - cfg.saturation..=1.0 + cfg.saturation)),
                _ => adjust_hue(&mut out, rng.random_range(-cfg.hue..=cfg.hue)),
            }
        }
    }
    if rng.random_bool(cfg.grayscale_p) {
        out = grayscale(&out);
    }
    if rng.random_bool(cfg.blur_p) {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        out = gaussian_blur(&out, sigma);
    }
    if rng.random_bool(cfg.solarize_p) {
        out = solarize(&out, cfg.solarize_threshold);
    }
    standardize(&mut out, &cfg.mean, &cfg.std);
    out
}

/// Per-channel mean and population std of `[0, 1]` images.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a Image>) -> ([f32; 3], [f32; 3]) {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut n = 0usize;
    for img in images {
        for px in img.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean = sum.map(|s| s / n);
    let std = [0, 1, 2].map(|c| ((sq[c] / n - mean[c] * mean[c]).max(1e-12)).sqrt() as f32);
    (mean.map(|m| m as f32), std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn image(seed: u64) -> Image {
        let mut r = stream(seed, &[]);
        Image::new(32, 32, 3, (0..3072).map(|_| r.random::<f32>()).collect())
    }

    fn no_extras() -> AugmentConfig {
        AugmentConfig {
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            ..AugmentConfig::default()
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let img = image(1);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        let full = CropParams { top: 0, left: 0, height: 32, width: 32, flip: true };
        assert_eq!(resized_crop(&img, &full, 32, 32), flip_horizontal(&img));
    }

    #[test]
    fn full_scale_no_flip_is_standardized_original() {
        let img = image(2);
        let cfg = AugmentConfig { crop_scale: [1.0, 1.0], flip_p: 0.0, ..AugmentConfig::default() };
        let view = simple_augment(&img, &cfg, &mut stream(3, &[]));
        let mut want = img.clone();
        standardize(&mut want, &cfg.mean, &cfg.std);
        assert_eq!(view, want);
    }

    #[test]
    fn fixed_seed_views_repeat() {
        let img = image(4);
        let cfg = AugmentConfig::default();
        for seed in 0..5 {
            assert_eq!(simple_augment(&img, &cfg, &mut stream(seed, &[])), simple_augment(&img, &cfg, &mut stream(seed, &[])));
            assert_eq!(complex_augment(&img, &cfg, &mut stream(seed, &[])), complex_augment(&img, &cfg, &mut stream(seed, &[])));
        }
    }

    #[test]
    fn complex_without_extras_equals_simple() {
        let img = image(5);
        let cfg = no_extras();
        for seed in 0..10 {
            assert_eq!(complex_augment(&img, &cfg, &mut stream(seed, &[])), simple_augment(&img, &cfg, &mut stream(seed, &[])));
        }
    }

    #[test]
    fn grayscale_channels_match() {
        let g = grayscale(&image(6));
        assert!(g.data.chunks_exact(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn solarize_is_piecewise_involution() {
        let t = 0.5;
        let vals: Vec<f32> = (0..=255u8).map(|v| v as f32 / 255.0).collect();
        let img = Image::new(1, 256, 1, vals.clone());
        let once = solarize(&img, t);
        let twice = solarize(&once, t);
        for (i, &x) in vals.iter().enumerate() {
            if x < t {
                assert_eq!(twice.data[i], x);
            } else {
                assert_eq!(twice.data[i], 1.0 - x);
            }
        }
    }

    #[test]
    fn complex_views_keep_shape_and_stay_finite() {
        let cfg = AugmentConfig { jitter_p: 1.0, grayscale_p: 0.5, blur_p: 1.0, solarize_p: 0.5, ..AugmentConfig::default() };
        for seed in 0..20 {
            let v = complex_augment(&image(seed), &cfg, &mut stream(seed, &[9]));
            assert_eq!((v.height, v.width, v.channels), (32, 32, 3));
            assert!(v.data.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn hue_roundtrip() {
        let mut img = image(7);
        let orig = img.clone();
        adjust_hue(&mut img, 0.3);
        adjust_hue(&mut img, -0.3);
        for (a, b) in img.data.iter().zip(&orig.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::new(32, 32, 3, vec![0.25; 3072]);
        let b = gaussian_blur(&img, 1.7);
        assert!(b.data.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn crops_stay_inside() {
        let cfg = AugmentConfig::default();
        let mut r = stream(8, &[]);
        for _ in 0..500 {
            let c = sample_crop(&mut r, 32, 32, &cfg);
            assert!(c.top + c.height <= 32 && c.left + c.width <= 32 && c.height > 0 && c.width > 0);
        }
    }
}
