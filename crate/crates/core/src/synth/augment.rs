//! Per-region geometric augmentation: rotation, translation, horizontal flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RegionSample;
use crate::error::{Result, SatError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    /// Defaults to `image_size / 12` when absent.
    pub max_shift: Option<usize>,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, max_rotation_deg: 15.0, max_shift: None, flip_prob: 0.5 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(SatError::Config(format!("invalid augmentation settings {self:?}")));
        }
        Ok(())
    }

    pub fn shift_bound(&self, image_size: usize) -> usize {
        self.max_shift.unwrap_or(image_size / 12)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionTransform {
    pub angle_deg: f64,
    pub dx: i64,
    pub dy: i64,
    pub flip: bool,
}

impl RegionTransform {
    pub const IDENTITY: RegionTransform = RegionTransform { angle_deg: 0.0, dx: 0, dy: 0, flip: false };

    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, image_size: usize, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let angle_deg = if cfg.max_rotation_deg > 0.0 {
            rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
        } else {
            0.0
        };
        let s = cfg.shift_bound(image_size) as i64;
        let dx = rng.random_range(-s..=s);
        let dy = rng.random_range(-s..=s);
        RegionTransform { angle_deg, dx, dy, flip }
    }

    /// Rotate about the centre, then translate, then mirror.
    pub fn apply(&self, img: &[f32], size: usize) -> Vec<f32> {
        let mut out = if self.angle_deg == 0.0 { img.to_vec() } else { rotate(img, size, self.angle_deg) };
        if self.dx != 0 || self.dy != 0 {
            out = shift(&out, size, self.dx, self.dy);
        }
        if self.flip {
            out = hflip(&out, size);
        }
        out
    }
}

/// Bilinear rotation by `angle_deg` about the image centre, zero fill.
pub fn rotate(img: &[f32], size: usize, angle_deg: f64) -> Vec<f32> {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let c = (size as f64 - 1.0) / 2.0;
    let px = |x: i64, y: i64| -> f64 {
        if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
            0.0
        } else {
            img[y as usize * size + x as usize] as f64
        }
    };
    let mut out = vec![0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 - c, y as f64 - c);
            // inverse map: source = R(-θ)·dest
            let sx = cos * u + sin * v + c;
            let sy = -sin * u + cos * v + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let val = px(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + px(x0 + 1, y0) * fx * (1.0 - fy)
                + px(x0, y0 + 1) * (1.0 - fx) * fy
                + px(x0 + 1, y0 + 1) * fx * fy;
            out[y * size + x] = val as f32;
        }
    }
    out
}

/// Integer translation; uncovered pixels become zero.
pub fn shift(img: &[f32], size: usize, dx: i64, dy: i64) -> Vec<f32> {
    let mut out = vec![0f32; size * size];
    let n = size as i64;
    for y in 0..n {
        let sy = y - dy;
        if !(0..n).contains(&sy) {
            continue;
        }
        for x in 0..n {
            let sx = x - dx;
            if (0..n).contains(&sx) {
                out[(y * n + x) as usize] = img[(sy * n + sx) as usize];
            }
        }
    }
    out
}

pub fn hflip(img: &[f32], size: usize) -> Vec<f32> {
    let mut out = img.to_vec();
    for row in out.chunks_mut(size) {
        row.reverse();
    }
    out
}

/// Applies `t` to region `r` of `sample` in place.
pub fn augment_region(sample: &mut RegionSample, r: usize, t: &RegionTransform) {
    let size = sample.images.shape()[3];
    let plane = size * size;
    let data = sample.images.data_mut();
    let slot = &mut data[r * plane..(r + 1) * plane];
    let out = t.apply(slot, size);
    slot.copy_from_slice(&out);
}

/// Independent random transform for every region; labels are untouched.
pub fn augment<R: Rng + ?Sized>(sample: &RegionSample, cfg: &AugmentConfig, rng: &mut R) -> RegionSample {
    let mut out = sample.clone();
    if !cfg.enabled {
        return out;
    }
    let size = sample.images.shape()[3];
    for r in 0..sample.labels.len() {
        let t = RegionTransform::draw(cfg, size, rng);
        augment_region(&mut out, r, &t);
    }
    out
}
