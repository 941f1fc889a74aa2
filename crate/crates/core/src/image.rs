//! Image and mask containers plus the pixel-level filters shared by the
//! synthesis, jitter and evaluation code.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::resize_bilinear;
use crate::tensor::Tensor;

/// Minimum side accepted for model inputs.
pub const MIN_SIDE: usize = 32;

/// RGB image, planar `(3, height, width)`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        assert_eq!(data.len(), 3 * width * height, "expected 3 planes of {width}x{height}");
        let img = Self { width, height, data };
        img.validate(MIN_SIDE)?;
        Ok(img)
    }

    /// Builds an image without the minimum-size check. Values are clamped to `[0, 1]`.
    pub fn from_raw(width: usize, height: usize, mut data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * width * height, "expected 3 planes of {width}x{height}");
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in rgb {
            data.extend(core::iter::repeat_n(c, width * height));
        }
        Self::from_raw(width, height, data)
    }

    pub fn validate(&self, min_side: usize) -> Result<()> {
        if self.width < min_side || self.height < min_side {
            return Err(Error::InvalidImage { channels: 3, height: self.height, width: self.width, min: min_side });
        }
        if self.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::PixelRange);
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn to_tensor<T: crate::Real>(&self) -> Tensor<T> {
        Tensor::from_f32(&[3, self.height, self.width], &self.data)
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let t = Tensor::<f32>::from_vec(&[3, self.height, self.width], self.data.clone());
        Self::from_raw(width, height, resize_bilinear(&t, height, width).into_vec())
    }

    /// Luma (BT.601) plane.
    pub fn to_gray(&self) -> Vec<f32> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter().zip(g).zip(b).map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
    }

    /// Copies the `(y0, x0, h, w)` window.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Self::from_raw(w, h, data)
    }

    /// Reflection-pads bottom/right so both sides become multiples of `multiple`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Self {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        self.reflect_pad(h, w)
    }

    pub fn reflect_pad(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        assert!(height >= self.height && width >= self.width);
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                let sy = reflect_index(y as isize, self.height);
                for x in 0..width {
                    data.push(self.get(c, sy, reflect_index(x as isize, self.width)));
                }
            }
        }
        Self::from_raw(width, height, data)
    }

    /// Quantizes to 8 bits per channel, interleaved RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize_u8(self.data[c * n + i]));
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Self {
        let n = width * height;
        assert_eq!(rgb.len(), 3 * n);
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                data[c * n + i] = rgb[3 * i + c] as f32 / 255.0;
            }
        }
        Self::from_raw(width, height, data)
    }

    /// Mean absolute difference over all channels.
    pub fn mean_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(self.size(), other.size());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / self.data.len() as f32
    }
}

#[inline]
pub fn quantize_u8(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Mirror index without edge repetition (`dcb|abcd|cba`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Per-pixel manipulation probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ProbabilityMask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        assert_eq!(data.len(), width * height);
        if data.iter().any(|p| !p.is_finite() || !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidProbability);
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, p: f32) -> Self {
        Self::new(width, height, vec![p; width * height]).expect("probability in [0, 1]")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// 8-bit encoding, `round(255 p)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&p| quantize_u8(p)).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self { width, height, data: bytes.iter().map(|&b| b as f32 / 255.0).collect() }
    }

    pub fn resize(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let t = Tensor::<f32>::from_vec(&[1, self.height, self.width], self.data.clone());
        let data = resize_bilinear(&t, height, width).into_vec().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self { width, height, data }
    }
}

impl From<&BinaryMask> for ProbabilityMask {
    fn from(m: &BinaryMask) -> Self {
        Self { width: m.width, height: m.height, data: m.data.iter().map(|&b| b as f32).collect() }
    }
}

/// Binary map, 1 = manipulated / object pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        assert!(data.iter().all(|&v| v <= 1), "binary mask values must be 0 or 1");
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { width, height, data }
    }

    pub fn rect(width: usize, height: usize, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(width, height, |y, x| y >= y0 && y < y0 + h && x >= x0 && x < x0 + w)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn union(&self, other: &Self) -> Self {
        assert_eq!(self.size(), other.size());
        Self { width: self.width, height: self.height, data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect() }
    }

    pub fn intersection_area(&self, other: &Self) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a != 0 && **b != 0).count()
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.intersection_area(other) > 0
    }

    /// Tight bounding box `(y0, x0, y1, x1)`, exclusive upper bounds.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        b
    }

    /// Chebyshev (square) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let (w, h) = (self.width, self.height);
        let mut rows = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                if self.get(y, x) {
                    let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
                    rows[y * w + x0..y * w + x1].fill(1);
                }
            }
        }
        let mut out = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                if rows[y * w + x] != 0 {
                    for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
                        out[yy * w + x] = 1;
                    }
                }
            }
        }
        Self { width: w, height: h, data: out }
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(width, height, |y, x| {
            let sy = (y * self.height / height).min(self.height - 1);
            let sx = (x * self.width / width).min(self.width - 1);
            self.get(sy, sx)
        })
    }

    /// Number of 4-connected components.
    pub fn components(&self) -> usize {
        let labels = label_components(self.width, self.height, |i| self.data[i] != 0);
        labels.iter().copied().max().unwrap_or(0) as usize
    }
}

/// 4-connected component labelling; returns labels `1..=n` (0 = off).
pub fn label_components(width: usize, height: usize, on: impl Fn(usize) -> bool) -> Vec<u32> {
    let mut labels = vec![0u32; width * height];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..width * height {
        if labels[start] != 0 || !on(start) {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / width, i % width);
            let mut visit = |j: usize| {
                if labels[j] == 0 && on(j) {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
    }
    labels
}

/// Separable Gaussian blur of `channels` planes, reflect border.
pub fn gaussian_blur(data: &[f32], channels: usize, height: usize, width: usize, sigma: f32, radius: usize) -> Vec<f32> {
    let kernel: Vec<f32> = {
        let raw: Vec<f32> = (0..=2 * radius)
            .map(|i| {
                let d = i as f32 - radius as f32;
                libm::expf(-d * d / (2.0 * sigma * sigma))
            })
            .collect();
        let s: f32 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    separable(data, channels, height, width, &kernel)
}

/// Separable convolution with a symmetric odd-length kernel, reflect border.
pub fn separable(data: &[f32], channels: usize, height: usize, width: usize, kernel: &[f32]) -> Vec<f32> {
    let r = (kernel.len() / 2) as isize;
    let n = height * width;
    let mut tmp = vec![0.0f32; data.len()];
    let mut out = vec![0.0f32; data.len()];
    for c in 0..channels {
        let src = &data[c * n..(c + 1) * n];
        let t = &mut tmp[c * n..(c + 1) * n];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - r, width);
                    acc += kv * src[y * width + sx];
                }
                t[y * width + x] = acc;
            }
        }
        let o = &mut out[c * n..(c + 1) * n];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - r, height);
                    acc += kv * t[sy * width + x];
                }
                o[y * width + x] = acc;
            }
        }
    }
    out
}

/// Gaussian sigma used for a given odd kernel size when none is specified.
pub fn sigma_for_kernel(ksize: usize) -> f32 {
    0.3 * ((ksize as f32 - 1.0) * 0.5 - 1.0) + 0.8
}
