//! Procedural scenes: smooth textured backgrounds with a few textured
//! objects, plus the per-pixel object label map. They stand in for web
//! images in tests, the CLI demo corpus and the desk-scale training runs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::image::{BinaryMask, ImageTensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: ImageTensor,
    /// 0 = background, `k` = object `k` (later objects occlude earlier ones).
    pub labels: Vec<u32>,
    pub objects: u32,
}

impl Scene {
    pub fn object_mask(&self, label: u32) -> BinaryMask {
        let (h, w) = self.image.size();
        BinaryMask::from_vec(w, h, self.labels.iter().map(|&l| (l == label) as u8).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: u32,
    pub max_objects: u32,
    pub noise: f32,
}

impl SceneConfig {
    pub fn square(side: usize) -> Self {
        Self { width: side, height: side, min_objects: 2, max_objects: 5, noise: 0.02 }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

pub fn generate<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Scene {
    let (w, h) = (cfg.width, cfg.height);
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f32 = rng.random_range(0.0..core::f32::consts::TAU);
    let (dx, dy) = (libm::cosf(angle), libm::sinf(angle));
    let freq: f32 = rng.random_range(0.05..0.4);
    let phase: f32 = rng.random_range(0.0..6.28);
    let amp: f32 = rng.random_range(0.02..0.08);
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f32 / w as f32 - 0.5) * dx + (y as f32 / h as f32 - 0.5) * dy + 0.75) / 1.5;
            let tex = amp * libm::sinf(freq * (x as f32 * dy - y as f32 * dx) + phase);
            for c in 0..3 {
                let noise = rng.random_range(-cfg.noise..=cfg.noise);
                data[c * n + y * w + x] = c0[c] * (1.0 - t) + c1[c] * t + tex + noise;
            }
        }
    }
    let mut labels = vec![0u32; n];
    let objects = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let side = w.min(h) as f32;
    for k in 1..=objects {
        let ow = rng.random_range(0.12 * side..0.35 * side);
        let oh = rng.random_range(0.12 * side..0.35 * side);
        let cx = rng.random_range(ow / 2.0..w as f32 - ow / 2.0);
        let cy = rng.random_range(oh / 2.0..h as f32 - oh / 2.0);
        let ellipse = rng.random_bool(0.5);
        let color = random_color(rng);
        let stripe_freq: f32 = rng.random_range(0.3..1.5);
        let stripe_amp: f32 = rng.random_range(0.03..0.12);
        let (sa, ca) = (libm::sinf(angle * k as f32), libm::cosf(angle * k as f32));
        let y0 = (cy - oh / 2.0).max(0.0) as usize;
        let y1 = ((cy + oh / 2.0) as usize + 1).min(h);
        let x0 = (cx - ow / 2.0).max(0.0) as usize;
        let x1 = ((cx + ow / 2.0) as usize + 1).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f32 + 0.5 - cx) / (ow / 2.0);
                let v = (y as f32 + 0.5 - cy) / (oh / 2.0);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if !inside {
                    continue;
                }
                labels[y * w + x] = k;
                let stripe = stripe_amp * libm::sinf(stripe_freq * (x as f32 * ca + y as f32 * sa));
                for c in 0..3 {
                    let noise = rng.random_range(-cfg.noise..=cfg.noise);
                    data[c * n + y * w + x] = color[c] + stripe + noise;
                }
            }
        }
    }
    Scene { image: ImageTensor::from_raw(w, h, data), labels, objects }
}
