use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_patch, tensors_to_bytes, BackendKind, FeatureBackend, FeaturePyramid, ViTFeatureStack, PYRAMID_STRIDES};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::tensor::Tensor;

/// Length of the per-tile descriptor fed to the random projection.
pub const DESCRIPTOR_LEN: usize = 60;

/// Statistics of one `size × size` tile at `(y0, x0)`: channel means and
/// standard deviations, mean absolute horizontal and vertical gradients,
/// and a 4×4 average-pooled thumbnail. Depends on tile pixels only.
pub fn tile_descriptor(image: &ImageTensor, y0: usize, x0: usize, size: usize) -> [f32; DESCRIPTOR_LEN] {
    let mut d = [0.0f32; DESCRIPTOR_LEN];
    let n = (size * size) as f32;
    for c in 0..3 {
        let (mut sum, mut sq, mut gx, mut gy) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
        for y in 0..size {
            for x in 0..size {
                let v = image.get(c, y0 + y, x0 + x);
                sum += v;
                sq += v * v;
                if x + 1 < size {
                    gx += (image.get(c, y0 + y, x0 + x + 1) - v).abs();
                }
                if y + 1 < size {
                    gy += (image.get(c, y0 + y + 1, x0 + x) - v).abs();
                }
            }
        }
        let mean = sum / n;
        d[c] = 2.0 * (mean - 0.5);
        d[3 + c] = 4.0 * libm::sqrtf((sq / n - mean * mean).max(0.0));
        let edges = (size * size.saturating_sub(1)).max(1) as f32;
        d[6 + c] = 4.0 * gx / edges;
        d[9 + c] = 4.0 * gy / edges;
        for by in 0..4 {
            let (ys, ye) = (by * size / 4, ((by + 1) * size).div_ceil(4));
            for bx in 0..4 {
                let (xs, xe) = (bx * size / 4, ((bx + 1) * size).div_ceil(4));
                let mut acc = 0.0;
                for y in ys..ye {
                    for x in xs..xe {
                        acc += image.get(c, y0 + y, x0 + x);
                    }
                }
                d[12 + (c * 4 + by) * 4 + bx] = 2.0 * (acc / ((ye - ys) * (xe - xs)) as f32 - 0.5);
            }
        }
    }
    d
}

/// Seeded `tanh(P · descriptor + b)` projection.
#[derive(Clone, Debug, PartialEq)]
struct Projection {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

impl Projection {
    fn new(rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let bound = libm::sqrtf(3.0 / DESCRIPTOR_LEN as f32) * 1.5;
        let weight = (0..channels * DESCRIPTOR_LEN).map(|_| rng.random_range(-bound..bound)).collect();
        let bias = (0..channels).map(|_| rng.random_range(-0.5..0.5)).collect();
        Self { weight: Tensor::from_vec(&[channels, DESCRIPTOR_LEN], weight), bias: Tensor::from_vec(&[channels], bias) }
    }

    fn channels(&self) -> usize {
        self.bias.len()
    }

    /// Feature grid with one token per `stride × stride` tile of an already padded image.
    fn grid(&self, image: &ImageTensor, stride: usize) -> Tensor<f32> {
        let (h, w) = image.size();
        let (gh, gw) = (h / stride, w / stride);
        let c = self.channels();
        let mut out = Tensor::zeros(&[c, gh, gw]);
        let data = out.data_mut();
        for ty in 0..gh {
            for tx in 0..gw {
                let d = tile_descriptor(image, ty * stride, tx * stride, stride);
                for ch in 0..c {
                    let row = &self.weight.data()[ch * DESCRIPTOR_LEN..(ch + 1) * DESCRIPTOR_LEN];
                    let z: f32 = row.iter().zip(&d).map(|(a, b)| a * b).sum::<f32>() + self.bias.data()[ch];
                    data[(ch * gh + ty) * gw + tx] = libm::tanhf(z);
                }
            }
        }
        out
    }
}

/// Deterministic ViT-kind stand-in: identical tiles give identical tokens at any position.
#[derive(Clone, Debug)]
pub struct StubBackend {
    id: String,
    patch_stride: usize,
    layers: [Projection; 4],
}

impl StubBackend {
    pub fn new(seed: u64, channels: usize, patch_stride: usize) -> Self {
        Self::with_id("stub", seed, channels, patch_stride)
    }

    pub fn with_id(id: &str, seed: u64, channels: usize, patch_stride: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = core::array::from_fn(|_| Projection::new(&mut rng, channels));
        Self { id: id.into(), patch_stride, layers }
    }

    pub fn patch_stride(&self) -> usize {
        self.patch_stride
    }
}

impl FeatureBackend for StubBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Vit
    }

    fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(Projection::channels).collect()
    }

    fn strides(&self) -> Vec<usize> {
        alloc::vec![self.patch_stride; 4]
    }

    fn extract_vit(&self, image: &ImageTensor) -> Result<ViTFeatureStack> {
        check_patch(image, self.patch_stride)?;
        let padded = image.reflect_pad_to_multiple(self.patch_stride);
        let layers = core::array::from_fn(|i| self.layers[i].grid(&padded, self.patch_stride));
        Ok(ViTFeatureStack { layers, patch_stride: self.patch_stride })
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        tensors_to_bytes(self.layers.iter().flat_map(|p| [&p.weight, &p.bias]))
    }
}

/// Deterministic pyramid-kind stand-in with per-stage projections.
#[derive(Clone, Debug)]
pub struct StubPyramidBackend {
    id: String,
    stages: [Projection; 4],
}

impl StubPyramidBackend {
    pub fn new(seed: u64, channels: [usize; 4]) -> Self {
        Self::with_id("stub-pyramid", seed, channels)
    }

    pub fn with_id(id: &str, seed: u64, channels: [usize; 4]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9a7a);
        let stages = core::array::from_fn(|i| Projection::new(&mut rng, channels[i]));
        Self { id: id.into(), stages }
    }
}

impl FeatureBackend for StubPyramidBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Pyramid
    }

    fn channels(&self) -> Vec<usize> {
        self.stages.iter().map(Projection::channels).collect()
    }

    fn strides(&self) -> Vec<usize> {
        PYRAMID_STRIDES.to_vec()
    }

    fn extract_pyramid(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        check_patch(image, 1)?;
        let padded = image.reflect_pad_to_multiple(32);
        let stages = self.stages.iter().zip(PYRAMID_STRIDES).map(|(p, s)| p.grid(&padded, s)).collect();
        Ok(FeaturePyramid { stages })
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        tensors_to_bytes(self.stages.iter().flat_map(|p| [&p.weight, &p.bias]))
    }
}
