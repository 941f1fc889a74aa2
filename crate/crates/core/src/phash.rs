//! 64-bit DCT perceptual hash.

use alloc::vec::Vec;

use crate::image::ImageTensor;

pub const HASH_SIDE: usize = 32;

/// Area-average resample of a single plane (exact box filter when shrinking).
fn area_resize(plane: &[f32], h: usize, w: usize, out: usize) -> Vec<f32> {
    let mut res = alloc::vec![0.0f32; out * out];
    for oy in 0..out {
        let (y0, y1) = (oy * h / out, ((oy + 1) * h).div_ceil(out).max(oy * h / out + 1));
        for ox in 0..out {
            let (x0, x1) = (ox * w / out, ((ox + 1) * w).div_ceil(out).max(ox * w / out + 1));
            let mut acc = 0.0f64;
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    acc += plane[y * w + x] as f64;
                }
            }
            res[oy * out + ox] = (acc / ((y1.min(h) - y0) * (x1.min(w) - x0)) as f64) as f32;
        }
    }
    res
}

/// Grayscale, 32×32 area resize, 2-D DCT; bit `i` of the low-frequency
/// 8×8 block is set when the coefficient exceeds the median of the 63 AC
/// coefficients.
pub fn phash(image: &ImageTensor) -> u64 {
    let (h, w) = image.size();
    let small = area_resize(&image.to_gray(), h, w, HASH_SIDE);
    let n = HASH_SIDE;
    let basis: Vec<f64> = (0..8 * n)
        .map(|i| {
            let (u, x) = (i / n, i % n);
            libm::cos(core::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64)
        })
        .collect();
    let mut coeffs = [0.0f64; 64];
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..n {
                let by = basis[v * n + y];
                let row = &small[y * n..(y + 1) * n];
                let mut r = 0.0;
                for (x, &p) in row.iter().enumerate() {
                    r += basis[u * n + x] * p as f64;
                }
                acc += by * r;
            }
            coeffs[v * 8 + u] = acc;
        }
    }
    let mut ac: Vec<f64> = coeffs[1..].to_vec();
    ac.sort_by(f64::total_cmp);
    let median = ac[ac.len() / 2];
    coeffs.iter().enumerate().fold(0u64, |h, (i, &c)| if c > median { h | (1 << i) } else { h })
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_hash_equal() {
        let img = ImageTensor::from_raw(40, 36, (0..3 * 40 * 36).map(|i| (i % 97) as f32 / 97.0).collect());
        assert_eq!(hamming(phash(&img), phash(&img.clone())), 0);
    }
}
