//! Lossy JPEG round trip and the artifact-removal filter boundary.
//!
//! [`BaselineJpeg`] reproduces the lossy half of a baseline JPEG encoder
//! (JFIF colour transform, 8×8 DCT, quality-scaled quantization with the
//! standard tables, 4:4:4 sampling). Entropy coding is lossless and is
//! skipped. Codecs that write real bitstreams live in the `miml` crate and
//! implement the same trait.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{quantize_u8, ImageTensor};

pub trait JpegCodec {
    /// Encodes at `quality` (1..=100) and decodes back.
    fn roundtrip(&self, image: &ImageTensor, quality: u8) -> ImageTensor;
}

/// Removes blocking artifacts; stands in for a learned JPEG restoration model.
pub trait ArtifactRemoval {
    fn restore(&self, image: &ImageTensor) -> ImageTensor;
}

const LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51, 87, 80,
    62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98,
    112, 100, 103, 99,
];

const CHROMA_Q: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99,
];

/// IJG quality scaling of a base quantization table.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [f32; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f32;
    }
    out
}

fn dct_basis() -> [[f32; 8]; 8] {
    let mut m = [[0.0f32; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let cu = if u == 0 { libm::sqrtf(0.125) } else { 0.5 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * libm::cosf((2 * x + 1) as f32 * u as f32 * core::f32::consts::PI / 16.0);
        }
    }
    m
}

fn transform(block: &[f32; 64], basis: &[[f32; 8]; 8], inverse: bool) -> [f32; 64] {
    let mut tmp = [0.0f32; 64];
    let mut out = [0.0f32; 64];
    // rows
    for y in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += if inverse { basis[x][u] * block[y * 8 + x] } else { basis[u][x] * block[y * 8 + x] };
            }
            tmp[y * 8 + u] = acc;
        }
    }
    // columns
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                acc += if inverse { basis[y][v] * tmp[y * 8 + u] } else { basis[v][y] * tmp[y * 8 + u] };
            }
            out[v * 8 + u] = acc;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BaselineJpeg;

impl JpegCodec for BaselineJpeg {
    fn roundtrip(&self, image: &ImageTensor, quality: u8) -> ImageTensor {
        let (h, w) = image.size();
        let n = h * w;
        let rgb: Vec<[f32; 3]> =
            (0..n).map(|i| [0, 1, 2].map(|c| quantize_u8(image.data()[c * n + i]) as f32)).collect();
        let mut planes = vec![vec![0.0f32; n]; 3];
        for (i, p) in rgb.iter().enumerate() {
            let [r, g, b] = *p;
            planes[0][i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            planes[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
            planes[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        }
        let basis = dct_basis();
        let tables = [scaled_table(&LUMA_Q, quality), scaled_table(&CHROMA_Q, quality)];
        for (ci, plane) in planes.iter_mut().enumerate() {
            let table = &tables[(ci > 0) as usize];
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let mut block = [0.0f32; 64];
                    for y in 0..8 {
                        for x in 0..8 {
                            // edge replication for partial blocks
                            let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                            block[y * 8 + x] = plane[sy * w + sx];
                        }
                    }
                    let mut coef = transform(&block, &basis, false);
                    for (c, &q) in coef.iter_mut().zip(table) {
                        *c = libm::roundf(*c / q) * q;
                    }
                    let rec = transform(&coef, &basis, true);
                    for y in 0..8.min(h - by) {
                        for x in 0..8.min(w - bx) {
                            plane[(by + y) * w + bx + x] = rec[y * 8 + x];
                        }
                    }
                }
            }
        }
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            let (yv, cb, cr) = (planes[0][i] + 128.0, planes[1][i], planes[2][i]);
            let rgb = [yv + 1.402 * cr, yv - 0.344_136 * cb - 0.714_136 * cr, yv + 1.772 * cb];
            for (c, v) in rgb.into_iter().enumerate() {
                data[c * n + i] = libm::roundf(v.clamp(0.0, 255.0)) / 255.0;
            }
        }
        ImageTensor::from_raw(w, h, data)
    }
}

/// Mild 3-tap smoothing across 8×8 block boundaries.
#[derive(Clone, Copy, Debug, Default)]
pub struct DeblockFilter;

impl ArtifactRemoval for DeblockFilter {
    fn restore(&self, image: &ImageTensor) -> ImageTensor {
        let (h, w) = image.size();
        let mut out = image.clone();
        for c in 0..3 {
            for y in 0..h {
                for bx in (8..w).step_by(8) {
                    let (p0, p, q, q0) = (image.get(c, y, bx.saturating_sub(2)), image.get(c, y, bx - 1), image.get(c, y, bx), image.get(c, y, (bx + 1).min(w - 1)));
                    out.set(c, y, bx - 1, 0.25 * p0 + 0.5 * p + 0.25 * q);
                    out.set(c, y, bx, 0.25 * p + 0.5 * q + 0.25 * q0);
                }
            }
            let src = out.clone();
            for by in (8..h).step_by(8) {
                for x in 0..w {
                    let (p0, p, q, q0) = (src.get(c, by.saturating_sub(2), x), src.get(c, by - 1, x), src.get(c, by, x), src.get(c, (by + 1).min(h - 1), x));
                    out.set(c, by - 1, x, 0.25 * p0 + 0.5 * p + 0.25 * q);
                    out.set(c, by, x, 0.25 * p + 0.5 * q + 0.25 * q0);
                }
            }
        }
        out
    }
}
