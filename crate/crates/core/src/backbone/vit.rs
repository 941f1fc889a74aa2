use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_patch, tensors_to_bytes, BackendKind, FeatureBackend, ViTFeatureStack};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::ParamSet;
use crate::real::Real;
use crate::tape::{conv_forward, ConvGeom};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub id: String,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 4 {
            return Err(Error::Config(format!("transformer depth {} < 4", self.depth)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every weight.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, p, m) = (self.dim, self.patch, self.dim * self.mlp_ratio);
        let mut out = vec![("patch_embed.weight".into(), vec![d, 3, p, p]), ("patch_embed.bias".into(), vec![d])];
        for i in 0..self.depth {
            let shapes: [(&str, Vec<usize>); 12] = [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("qkv.weight", vec![3 * d, d]),
                ("qkv.bias", vec![3 * d]),
                ("proj.weight", vec![d, d]),
                ("proj.bias", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("fc1.weight", vec![m, d]),
                ("fc1.bias", vec![m]),
                ("fc2.weight", vec![d, m]),
                ("fc2.bias", vec![d]),
            ];
            out.extend(shapes.into_iter().map(|(n, s)| (format!("blocks.{i}.{n}"), s)));
        }
        out
    }
}

/// Frozen pre-norm vision transformer returning its last four block outputs.
///
/// Weights come from a file through the `miml` crate, or from a seed for tests.
pub struct TransformerBackbone {
    config: TransformerConfig,
    params: ParamSet<f32>,
}

impl TransformerBackbone {
    pub fn from_params(config: TransformerConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Config(format!("expected {} tensors, found {}", expected.len(), params.len())));
        }
        for ((name, shape), p) in expected.iter().zip(params.iter()) {
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::Config(format!("tensor `{}` {:?} does not match `{name}` {shape:?}", p.name, p.value.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn random(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("gamma") {
                vec![1.0; n]
            } else if name.ends_with("bias") || name.ends_with("beta") {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = libm::sqrtf(3.0 / fan_in as f32);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.add(&name, Tensor::from_vec(&shape, data));
        }
        Self::from_params(config, params)
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn w(&self, name: &str) -> &Tensor<f32> {
        self.params.value(self.params.find(name).expect("validated parameter"))
    }

    fn block(&self, i: usize, x: &[f32], n: usize) -> Vec<f32> {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let p = |s: &str| format!("blocks.{i}.{s}");
        let h = layer_norm(x, n, d, self.w(&p("ln1.gamma")), self.w(&p("ln1.beta")));
        let qkv = linear(&h, n, self.w(&p("qkv.weight")), self.w(&p("qkv.bias")));
        let mut attn_out = vec![0.0f32; n * d];
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let mut scores = vec![0.0f32; n * n];
        for head in 0..heads {
            let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
            // scores = q kᵀ
            f32::gemm(n, dh, n, &qkv[qo..], 3 * d, 1, &qkv[ko..], 1, 3 * d, &mut scores, n, 0.0);
            for row in scores.chunks_mut(n) {
                let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = libm::expf(*v * scale - m);
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            f32::gemm(n, n, dh, &scores, n, 1, &qkv[vo..], 3 * d, 1, &mut attn_out[head * dh..], d, 0.0);
        }
        let proj = linear(&attn_out, n, self.w(&p("proj.weight")), self.w(&p("proj.bias")));
        let x1: Vec<f32> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let h2 = layer_norm(&x1, n, d, self.w(&p("ln2.gamma")), self.w(&p("ln2.beta")));
        let mut m = linear(&h2, n, self.w(&p("fc1.weight")), self.w(&p("fc1.bias")));
        for v in &mut m {
            *v = gelu(*v);
        }
        let out = linear(&m, n, self.w(&p("fc2.weight")), self.w(&p("fc2.bias")));
        x1.iter().zip(&out).map(|(a, b)| a + b).collect()
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::tanhf(0.797_884_6 * (x + 0.044_715 * x * x * x)))
}

fn layer_norm(x: &[f32], n: usize, d: usize, gamma: &Tensor<f32>, beta: &Tensor<f32>) -> Vec<f32> {
    let mut out = vec![0.0; n * d];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / libm::sqrtf(var + 1e-6);
        for (j, (ov, &v)) in o.iter_mut().zip(row).enumerate() {
            *ov = (v - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

/// `x (n × in) · Wᵀ + b` with `W` shaped `(out, in)`.
fn linear(x: &[f32], n: usize, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f32> {
    let (out, input) = (w.shape()[0], w.shape()[1]);
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    f32::gemm(n, input, out, x, input, 1, w.data(), 1, input, &mut y, out, 1.0);
    y
}

impl FeatureBackend for TransformerBackbone {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Vit
    }

    fn channels(&self) -> Vec<usize> {
        vec![self.config.dim; 4]
    }

    fn strides(&self) -> Vec<usize> {
        vec![self.config.patch; 4]
    }

    fn extract_vit(&self, image: &ImageTensor) -> Result<ViTFeatureStack> {
        let patch = self.config.patch;
        check_patch(image, patch)?;
        let padded = image.reflect_pad_to_multiple(patch);
        let geom = ConvGeom { stride: patch, padding: 0, dilation: 1 };
        let emb = conv_forward(&padded.to_tensor::<f32>(), self.w("patch_embed.weight"), Some(self.w("patch_embed.bias")), geom);
        let (d, gh, gw) = emb.chw();
        let n = gh * gw;
        let mut x = vec![0.0f32; n * d];
        for c in 0..d {
            for t in 0..n {
                x[t * d + c] = emb.data()[c * n + t];
            }
        }
        let mut layers = Vec::new();
        for i in 0..self.config.depth {
            x = self.block(i, &x, n);
            if i + 4 >= self.config.depth {
                let mut grid = Tensor::zeros(&[d, gh, gw]);
                for t in 0..n {
                    for c in 0..d {
                        grid.data_mut()[c * n + t] = x[t * d + c];
                    }
                }
                layers.push(grid);
            }
        }
        let layers: [Tensor<f32>; 4] = layers.try_into().expect("four trailing blocks");
        Ok(ViTFeatureStack { layers, patch_stride: patch })
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        tensors_to_bytes(self.params.iter().map(|p| &p.value))
    }
}
