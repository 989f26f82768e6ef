use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::StimuliError;
use crate::autodiff::reflect101_index;

/// Training-time augmentation magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub horizontal_flip_prob: f64,
    /// Maximum shift as a fraction of width/height.
    pub max_shift_fraction: f64,
    pub scale_range: (f64, f64),
    pub max_rotation_degrees: f64,
    /// Additive brightness offset drawn from `[-delta, delta]`.
    pub brightness_delta: f64,
    /// Contrast factor range, applied around the image mean.
    pub contrast_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            max_shift_fraction: 0.05,
            scale_range: (0.95, 1.05),
            max_rotation_degrees: 10.0,
            brightness_delta: 0.1,
            contrast_range: (0.9, 1.1),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Configuration that leaves every image untouched.
    pub fn off() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            max_shift_fraction: 0.0,
            scale_range: (1.0, 1.0),
            max_rotation_degrees: 0.0,
            brightness_delta: 0.0,
            contrast_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), StimuliError> {
        let ok = (0.0..=1.0).contains(&self.horizontal_flip_prob)
            && self.max_shift_fraction >= 0.0
            && self.scale_range.0 > 0.0
            && self.scale_range.0 <= self.scale_range.1
            && self.max_rotation_degrees >= 0.0
            && self.brightness_delta >= 0.0
            && self.contrast_range.0 >= 0.0
            && self.contrast_range.0 <= self.contrast_range.1;
        if ok {
            Ok(())
        } else {
            Err(StimuliError::Config(format!(
                "invalid augmentation config {self:?}"
            )))
        }
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.set(x, y, ch, img.get(w - 1 - x, y, ch));
            }
        }
    }
    out
}

/// Inverse-mapped affine warp about the image center with bilinear sampling and
/// reflect-101 borders.
pub fn affine(img: &Image, shift: (f64, f64), scale: f64, rotation_deg: f64) -> Image {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let mut out = img.clone();
    let mut px = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            // output -> source: undo shift, rotation and scale
            let ux = x as f64 - cx - shift.0;
            let uy = y as f64 - cy - shift.1;
            let sx = (cos * ux + sin * uy) / scale + cx;
            let sy = (-sin * ux + cos * uy) / scale + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            px.iter_mut().for_each(|v| *v = 0.0);
            for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
                for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                    let wgt = wy * wx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let ix = reflect101_index(x0 as isize + dx, w);
                    let iy = reflect101_index(y0 as isize + dy, h);
                    for (ch, v) in px.iter_mut().enumerate() {
                        *v += wgt * img.get(ix, iy, ch) as f64;
                    }
                }
            }
            for (ch, v) in px.iter().enumerate() {
                out.set(x, y, ch, *v as f32);
            }
        }
    }
    out
}

/// Random flip, affine jitter, brightness and contrast, clamped to `[0,1]`.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let mut out = img.clone();
    if cfg.horizontal_flip_prob > 0.0 && rng.random_bool(cfg.horizontal_flip_prob) {
        out = flip_horizontal(&out);
    }
    let sym = |rng: &mut R, m: f64| {
        if m > 0.0 {
            rng.random_range(-m..=m)
        } else {
            0.0
        }
    };
    let range = |rng: &mut R, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    let shift = (
        sym(rng, cfg.max_shift_fraction) * img.width() as f64,
        sym(rng, cfg.max_shift_fraction) * img.height() as f64,
    );
    let scale = range(rng, cfg.scale_range);
    let rotation = sym(rng, cfg.max_rotation_degrees);
    if shift != (0.0, 0.0) || scale != 1.0 || rotation != 0.0 {
        out = affine(&out, shift, scale, rotation);
    }
    let brightness = sym(rng, cfg.brightness_delta) as f32;
    let contrast = range(rng, cfg.contrast_range) as f32;
    if brightness != 0.0 || contrast != 1.0 {
        let mean = out.mean() as f32;
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v - mean) * contrast + mean + brightness);
    }
    out.clamp01();
    out
}
