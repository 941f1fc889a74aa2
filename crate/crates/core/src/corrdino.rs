//! Correlation over frozen transformer features for shared-donor pairs:
//! all-pairs correlation, learnable aggregation, feature super-resolution
//! and the multi-aspect denoiser (also used by the difference-aware
//! segmenter).

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackendHandle, ViTFeatureStack};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor, ProbabilityMask};
use crate::nn::{Builder, Conv2d, ParamSet};
use crate::real::Real;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;
use crate::train::Objective;

/// `data[k, i, j]` = clamped cosine similarity between source token `(i, j)`
/// and target token `k = row * gw + col`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    pub data: Tensor<f32>,
}

fn token_major_unit(f: &Tensor<f32>) -> Vec<f32> {
    let (c, h, w) = f.chw();
    let n = h * w;
    let mut out = alloc::vec![0.0f32; n * c];
    for t in 0..n {
        let mut sq = 0.0f32;
        for ch in 0..c {
            let v = f.data()[ch * n + t];
            out[t * c + ch] = v;
            sq += v * v;
        }
        let norm = libm::sqrtf(sq);
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        for v in &mut out[t * c..(t + 1) * c] {
            *v *= inv;
        }
    }
    out
}

/// All-pairs `max(0, cos)` between the tokens of `source` and `target`.
///
/// Each entry is an in-order dot product of unit vectors, so swapping the
/// arguments transposes the volume exactly.
pub fn correlation(source: &Tensor<f32>, target: &Tensor<f32>) -> Result<CorrelationVolume> {
    let (c, h, w) = source.chw();
    if target.chw() != (c, h, w) {
        let (_, th, tw) = target.chw();
        return Err(Error::SizeMismatch { expected: (h, w), actual: (th, tw) });
    }
    let n = h * w;
    let xs = token_major_unit(source);
    let ys = token_major_unit(target);
    let mut data = alloc::vec![0.0f32; n * n];
    for k in 0..n {
        let y = &ys[k * c..(k + 1) * c];
        let row = &mut data[k * n..(k + 1) * n];
        for (s, out) in row.iter_mut().enumerate() {
            let x = &xs[s * c..(s + 1) * c];
            let mut acc = 0.0f32;
            for ch in 0..c {
                acc += x[ch] * y[ch];
            }
            *out = acc.clamp(0.0, 1.0);
        }
    }
    Ok(CorrelationVolume { data: Tensor::from_vec(&[n, h, w], data) })
}

/// `[conv(relu(conv(corr))), mean_c(corr), max_c(corr)]`.
#[derive(Clone, Debug)]
pub struct LearnableAggregation {
    pub reduce: Conv2d,
    pub mix: Conv2d,
}

impl LearnableAggregation {
    pub fn new<T: Real, R: rand::Rng>(b: &mut Builder<'_, T, R>, in_channels: usize, k: usize) -> Self {
        b.scoped("aggregation", |b| Self { reduce: b.conv_same("reduce", in_channels, k, 1, 1), mix: b.conv_same("mix", k, k, 1, 1) })
    }

    pub fn out_channels(&self) -> usize {
        self.mix.output + 2
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, corr: Var) -> Var {
        let h = self.reduce.forward_relu(tape, corr);
        let learned = self.mix.forward(tape, h);
        let mean = tape.channel_mean(corr);
        let max = tape.channel_max(corr);
        tape.concat(&[learned, mean, max])
    }
}

/// Upsampling factor of each level, finest first.
pub const SR_SCALES: [usize; 4] = [8, 4, 2, 1];

#[derive(Clone, Debug)]
pub struct FeatureSuperResolution {
    /// `(features, aggregation, output)` 1×1 projections per level, finest first.
    pub levels: Vec<(Conv2d, Conv2d, Conv2d)>,
}

impl FeatureSuperResolution {
    pub fn new<T: Real, R: rand::Rng>(b: &mut Builder<'_, T, R>, feat_channels: usize, aggr_channels: usize, width: usize) -> Self {
        b.scoped("fsr", |b| {
            let levels = SR_SCALES
                .iter()
                .map(|s| {
                    (
                        b.conv_same(&alloc::format!("x{s}.feat"), feat_channels, width, 1, 1),
                        b.conv_same(&alloc::format!("x{s}.aggr"), aggr_channels, width, 1, 1),
                        b.conv_same(&alloc::format!("x{s}.out"), width, width, 1, 1),
                    )
                })
                .collect();
            Self { levels }
        })
    }

    /// `features` is the channel concatenation of the four layers on the token grid.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, features: Var, aggr: Var) -> [Var; 4] {
        let (_, gh, gw) = tape.shape(features);
        let mut out = [features; 4];
        for (i, ((feat, ag, proj), &s)) in self.levels.iter().zip(&SR_SCALES).enumerate() {
            // 1×1 projections commute with bilinear interpolation, so both paths
            // are projected on the token grid and the sum is resampled once.
            let a = feat.forward(tape, features);
            let g = ag.forward(tape, aggr);
            let sum = tape.add(a, g);
            let up = tape.resize(sum, gh * s, gw * s);
            out[i] = proj.forward(tape, up);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Channels of every fused level.
    pub width: usize,
    /// Channels of each dilated branch.
    pub branch_width: usize,
}

pub const DILATIONS: [usize; 4] = [1, 2, 3, 6];

/// Top-down fusion with a global-context top level, a parallel dilated
/// block at the finest scale and a single-channel head.
#[derive(Clone, Debug)]
pub struct MultiAspectDenoiser {
    top: Conv2d,
    lateral: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
    dilated: Vec<Conv2d>,
    head: Conv2d,
}

impl MultiAspectDenoiser {
    /// `in_channels` per level, finest first.
    pub fn new<T: Real, R: rand::Rng>(b: &mut Builder<'_, T, R>, in_channels: [usize; 4], cfg: DenoiserConfig) -> Self {
        let d = cfg.width;
        b.scoped("denoiser", |b| {
            let top = b.conv_same("top", 2 * in_channels[3], d, 3, 1);
            let lateral = (0..3).map(|n| b.conv_same(&alloc::format!("lateral{n}"), in_channels[n], d, 1, 1)).collect();
            let fuse = (0..3).map(|n| b.conv_same(&alloc::format!("fuse{n}"), d, d, 3, 1)).collect();
            let dilated = DILATIONS.iter().map(|&r| b.conv_same(&alloc::format!("dilated{r}"), 4 * d, cfg.branch_width, 3, r)).collect();
            let head = b.conv_same("head", 4 * cfg.branch_width + d, 1, 3, 1);
            Self { top, lateral, fuse, dilated, head }
        })
    }

    /// Returns single-channel logits at the finest level's resolution.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, levels: [Var; 4]) -> Var {
        let (_, h4, w4) = tape.shape(levels[3]);
        let pooled = tape.global_avg_pool(levels[3]);
        let pooled = tape.broadcast(pooled, h4, w4);
        let top_in = tape.concat(&[levels[3], pooled]);
        let mut fused = [levels[3]; 4];
        fused[3] = self.top.forward_relu(tape, top_in);
        for n in (0..3).rev() {
            let (_, h, w) = tape.shape(levels[n]);
            let up = tape.resize(fused[n + 1], h, w);
            let lat = self.lateral[n].forward(tape, levels[n]);
            let sum = tape.add(up, lat);
            fused[n] = self.fuse[n].forward_relu(tape, sum);
        }
        let (_, h, w) = tape.shape(fused[0]);
        let ups: Vec<Var> = fused.iter().map(|&f| tape.resize(f, h, w)).collect();
        let cat = tape.concat(&ups);
        let mut branches: Vec<Var> = self.dilated.iter().map(|conv| conv.forward_relu(tape, cat)).collect();
        branches.push(fused[0]);
        let joined = tape.concat(&branches);
        self.head.forward(tape, joined)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrDinoConfig {
    pub backend_id: String,
    /// Aggregated correlation channels (K).
    pub aggregation_channels: usize,
    /// Super-resolved feature channels (D).
    pub sr_channels: usize,
    pub denoiser: DenoiserConfig,
    /// Feature channels per backbone layer.
    pub feature_channels: usize,
    /// Token grid the model was built for.
    pub grid: (usize, usize),
}

impl CorrDinoConfig {
    pub fn new(backend_id: &str, feature_channels: usize, grid: (usize, usize)) -> Self {
        Self {
            backend_id: backend_id.into(),
            aggregation_channels: 64,
            sr_channels: 128,
            denoiser: DenoiserConfig { width: 128, branch_width: 128 },
            feature_channels,
            grid,
        }
    }
}

/// Frozen-backbone features and correlation inputs of one ordered pair.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    /// `[corr(a, b), corr(a, a)]`, `2·gh·gw` channels.
    pub corr_a: Tensor<f32>,
    pub corr_b: Tensor<f32>,
    /// Four layers concatenated along channels.
    pub stack_a: Tensor<f32>,
    pub stack_b: Tensor<f32>,
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
    pub padded_a: (usize, usize),
    pub padded_b: (usize, usize),
}

fn concat_layers(stack: &ViTFeatureStack) -> Tensor<f32> {
    let (c, h, w) = stack.layers[0].chw();
    let mut data = Vec::with_capacity(4 * c * h * w);
    for l in &stack.layers {
        data.extend_from_slice(l.data());
    }
    Tensor::from_vec(&[4 * c, h, w], data)
}

fn concat_volumes(a: CorrelationVolume, b: CorrelationVolume) -> Tensor<f32> {
    let (n, h, w) = a.data.chw();
    let mut data = a.data.into_vec();
    data.extend_from_slice(b.data.data());
    Tensor::from_vec(&[2 * n, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

pub struct CorrDino<T: Real> {
    pub config: CorrDinoConfig,
    pub params: ParamSet<T>,
    backend: BackendHandle,
    aggregation: LearnableAggregation,
    fsr: FeatureSuperResolution,
    denoiser: MultiAspectDenoiser,
}

impl<T: Real> CorrDino<T> {
    pub fn new(config: CorrDinoConfig, backend: BackendHandle, seed: u64) -> Result<Self> {
        if backend.id() != config.backend_id {
            return Err(Error::Config(alloc::format!("backend `{}` does not match config `{}`", backend.id(), config.backend_id)));
        }
        if !backend.frozen() {
            return Err(Error::Config(alloc::format!("backend `{}` must be frozen", backend.id())));
        }
        let feats = backend.channels();
        if feats[0] != config.feature_channels {
            return Err(Error::Config(alloc::format!("backend has {} channels, config {}", feats[0], config.feature_channels)));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let tokens = config.grid.0 * config.grid.1;
        let aggregation = LearnableAggregation::new(&mut b, 2 * tokens, config.aggregation_channels);
        let fsr = FeatureSuperResolution::new(&mut b, 4 * config.feature_channels, aggregation.out_channels(), config.sr_channels);
        let denoiser = MultiAspectDenoiser::new(&mut b, [config.sr_channels; 4], config.denoiser);
        Ok(Self { config, params, backend, aggregation, fsr, denoiser })
    }

    pub fn backend(&self) -> &BackendHandle {
        &self.backend
    }

    /// Runs the frozen backbone and the correlation module on both images.
    pub fn prepare(&self, img_a: &ImageTensor, img_b: &ImageTensor) -> Result<PairFeatures> {
        let sa = self.backend.extract_vit(img_a)?;
        let sb = self.backend.extract_vit(img_b)?;
        for s in [&sa, &sb] {
            if s.grid() != self.config.grid {
                return Err(Error::SizeMismatch { expected: self.config.grid, actual: s.grid() });
            }
        }
        let corr_a = concat_volumes(correlation(sa.last(), sb.last())?, correlation(sa.last(), sa.last())?);
        let corr_b = concat_volumes(correlation(sb.last(), sa.last())?, correlation(sb.last(), sb.last())?);
        let stride = sa.patch_stride;
        let padded = |img: &ImageTensor| (img.height().div_ceil(stride) * stride, img.width().div_ceil(stride) * stride);
        Ok(PairFeatures {
            corr_a,
            corr_b,
            stack_a: concat_layers(&sa),
            stack_b: concat_layers(&sb),
            size_a: img_a.size(),
            size_b: img_b.size(),
            padded_a: padded(img_a),
            padded_b: padded(img_b),
        })
    }

    /// Logits for one side at that image's resolution.
    pub fn logits(&self, tape: &mut Tape<'_, T>, f: &PairFeatures, side: Side) -> Var {
        let (corr, stack, size, padded) = match side {
            Side::A => (&f.corr_a, &f.stack_a, f.size_a, f.padded_a),
            Side::B => (&f.corr_b, &f.stack_b, f.size_b, f.padded_b),
        };
        let corr = tape.input(Tensor::cast(corr));
        let stack = tape.input(Tensor::cast(stack));
        let aggr = self.aggregation.forward(tape, corr);
        let levels = self.fsr.forward(tape, stack, aggr);
        let logits = self.denoiser.forward(tape, levels);
        let full = tape.resize(logits, padded.0, padded.1);
        tape.crop(full, size.0, size.1)
    }

    /// Cross entropy on each side that has a label.
    pub fn loss(&self, tape: &mut Tape<'_, T>, f: &PairFeatures, mask_a: Option<&BinaryMask>, mask_b: Option<&BinaryMask>) -> Option<Var> {
        let mut total: Option<Var> = None;
        for (side, mask) in [(Side::A, mask_a), (Side::B, mask_b)] {
            let Some(mask) = mask else { continue };
            let logits = self.logits(tape, f, side);
            let target: Vec<T> = mask.data().iter().map(|&v| T::lit(v as f64)).collect();
            let l = tape.bce_with_logits(logits, &target);
            total = Some(match total {
                Some(t) => tape.add(t, l),
                None => l,
            });
        }
        total
    }

    pub fn predict_prepared(&self, f: &PairFeatures) -> (ProbabilityMask, ProbabilityMask) {
        let run = |side: Side, size: (usize, usize)| {
            let mut tape = Tape::new(&self.params);
            let logits = self.logits(&mut tape, f, side);
            let data = tape.value(logits).data().iter().map(|&z| sigmoid(z).as_f32()).collect();
            ProbabilityMask::new(size.1, size.0, data).expect("sigmoid output lies in [0, 1]")
        };
        (run(Side::A, f.size_a), run(Side::B, f.size_b))
    }
}

/// Masks for both images of a shared-donor pair.
pub fn corr_dino_forward<T: Real>(img_a: &ImageTensor, img_b: &ImageTensor, model: &CorrDino<T>) -> Result<(ProbabilityMask, ProbabilityMask)> {
    img_a.validate(crate::image::MIN_SIDE)?;
    img_b.validate(crate::image::MIN_SIDE)?;
    let f = model.prepare(img_a, img_b)?;
    Ok(model.predict_prepared(&f))
}

#[derive(Clone, Debug)]
pub struct CorrDinoSample {
    pub features: PairFeatures,
    pub mask_a: Option<BinaryMask>,
    pub mask_b: Option<BinaryMask>,
}

impl Objective for CorrDino<f32> {
    type Sample = CorrDinoSample;

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<'_, f32>, sample: &CorrDinoSample) -> Option<Var> {
        CorrDino::loss(self, tape, &sample.features, sample.mask_a.as_ref(), sample.mask_b.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(data: &[[f32; 2]], h: usize, w: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[2, h, w]);
        for (i, v) in data.iter().enumerate() {
            t.data_mut()[i] = v[0];
            t.data_mut()[h * w + i] = v[1];
        }
        t
    }

    #[test]
    fn zero_target_gives_zero_volume() {
        let x = grid(&[[1.0, 0.0], [0.5, 0.5], [0.0, 2.0], [-1.0, 1.0]], 2, 2);
        let y = Tensor::zeros(&[2, 2, 2]);
        let v = correlation(&x, &y).unwrap();
        assert!(v.data.data().iter().all(|&c| c == 0.0));
        assert_eq!(v.data.chw(), (4, 2, 2));
    }

    #[test]
    fn opposite_vectors_clamp_to_zero() {
        let x = grid(&[[1.0, 0.0], [-1.0, 0.0]], 1, 2);
        let v = correlation(&x, &x).unwrap();
        // target 1 (pointing -x) vs source 0 (pointing +x)
        assert_eq!(v.data.data()[2], 0.0);
        assert!((v.data.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(correlation(&Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[2, 2, 3])).is_err());
    }
}
