//! Finite-difference checks of each decoder block on toy shapes.

use miml_core::backbone::CnnEncoder;
use miml_core::corrdino::{DenoiserConfig, FeatureSuperResolution, LearnableAggregation, MultiAspectDenoiser};
use miml_core::nn::{Builder, ParamSet};
use miml_core::tensor::Tensor;
use miml_core::webiml::{MultiScalePerception, NestedChannelAttention, SelfRectification};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{jitter_biases, max_param_error, probe_weights};

const SAMPLES_PER_TENSOR: usize = 12;

fn tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_vec(&[c, h, w], probe_weights(c * h * w, seed))
}

/// Correlation aggregation on a 4×4 grid (16 correlation channels, K = 4).
pub fn learnable_aggregation() -> f64 {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let la = LearnableAggregation::new(&mut Builder::new(&mut params, &mut rng), 16, 4);
    jitter_biases(&mut params);
    let corr: Vec<f64> = probe_weights(16 * 16, 12).iter().map(|v| 0.5 * (v + 1.0)).collect();
    let corr = Tensor::from_vec(&[16, 4, 4], corr);
    let ids: Vec<_> = params.ids().collect();
    max_param_error(&params, &ids, SAMPLES_PER_TENSOR, |t| {
        let c = t.input(corr.clone());
        let out = la.forward(t, c);
        let n = t.value(out).len();
        t.dot(out, &probe_weights(n, 13))
    })
}

/// Four-level denoiser from 8×8 down to 1×1, 4 channels per level.
pub fn multi_aspect_denoiser() -> f64 {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mad = MultiAspectDenoiser::new(&mut Builder::new(&mut params, &mut rng), [4; 4], DenoiserConfig { width: 4, branch_width: 3 });
    jitter_biases(&mut params);
    let levels: Vec<Tensor<f64>> = [8, 4, 2, 1].iter().enumerate().map(|(i, &s)| tensor(4, s, s, 22 + i as u64)).collect();
    let ids: Vec<_> = params.ids().collect();
    max_param_error(&params, &ids, SAMPLES_PER_TENSOR, |t| {
        let v: Vec<_> = levels.iter().map(|l| t.input(l.clone())).collect();
        let out = mad.forward(t, [v[0], v[1], v[2], v[3]]);
        let n = t.value(out).len();
        t.dot(out, &probe_weights(n, 23))
    })
}

/// Feature super-resolution from a 2×2 grid of 8-channel tokens.
pub fn feature_super_resolution() -> f64 {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let fsr = FeatureSuperResolution::new(&mut Builder::new(&mut params, &mut rng), 8, 6, 4);
    jitter_biases(&mut params);
    let (feat, aggr) = (tensor(8, 2, 2, 32), tensor(6, 2, 2, 33));
    let ids: Vec<_> = params.ids().collect();
    max_param_error(&params, &ids, SAMPLES_PER_TENSOR, |t| {
        let (f, a) = (t.input(feat.clone()), t.input(aggr.clone()));
        let levels = fsr.forward(t, f, a);
        let joined: Vec<_> = levels.iter().map(|&l| t.global_avg_pool(l)).collect();
        let out = t.concat(&joined);
        let n = t.value(out).len();
        t.dot(out, &probe_weights(n, 34))
    })
}

/// Pyramid perception with stages of 8², 4², 2² and 1², 4 channels each.
pub fn multi_scale_perception() -> f64 {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mp = MultiScalePerception::new(&mut Builder::new(&mut params, &mut rng), [4; 4], 4);
    jitter_biases(&mut params);
    let stages: Vec<Tensor<f64>> = [8, 4, 2, 1].iter().enumerate().map(|(i, &s)| tensor(4, s, s, 42 + i as u64)).collect();
    let ids: Vec<_> = params.ids().collect();
    max_param_error(&params, &ids, SAMPLES_PER_TENSOR, |t| {
        let v: Vec<_> = stages.iter().map(|l| t.input(l.clone())).collect();
        let fused = mp.forward(t, [v[0], v[1], v[2], v[3]]);
        let pooled: Vec<_> = fused.iter().map(|&l| t.global_avg_pool(l)).collect();
        let pooled = t.concat(&pooled);
        let n = t.value(pooled).len();
        let coarse = t.dot(pooled, &probe_weights(n, 46));
        let n = t.value(fused[0]).len();
        let fine = t.dot(fused[0], &probe_weights(n, 47));
        t.add(coarse, fine)
    })
}

/// Nested channel attention on 16 channels at 5×5, checked for weights and input.
pub fn nested_channel_attention() -> f64 {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let nca = NestedChannelAttention::new(&mut Builder::new(&mut params, &mut rng), 16);
    let x = params.add("x", tensor(16, 5, 5, 52));
    let ids: Vec<_> = params.ids().collect();
    max_param_error(&params, &ids, 40, |t| {
        let xv = t.param(x);
        let out = nca.forward(t, xv);
        let n = t.value(out).len();
        t.dot(out, &probe_weights(n, 53))
    })
}

/// One self-rectification round on an 8×8 map of width 4.
pub fn self_rectification() -> f64 {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let sr = SelfRectification::new(&mut Builder::new(&mut params, &mut rng), "r", 4);
    jitter_biases(&mut params);
    let (fa, p) = (tensor(4, 8, 8, 62), tensor(1, 8, 8, 63));
    let ids: Vec<_> = params.ids().collect();
    max_param_error(&params, &ids, SAMPLES_PER_TENSOR, |t| {
        let (f, pl) = (t.input(fa.clone()), t.input(p.clone()));
        let (fo, logits) = sr.forward(t, f, pl);
        let out = t.concat(&[fo, logits]);
        let n = t.value(out).len();
        t.dot(out, &probe_weights(n, 64))
    })
}

/// Convolutional encoder stages on a 32×32 input.
pub fn cnn_encoder() -> f64 {
    let mut params = ParamSet::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let enc = CnnEncoder::new(&mut Builder::new(&mut params, &mut rng), 3, [3, 4, 4, 5]);
    jitter_biases(&mut params);
    let x = tensor(3, 32, 32, 72);
    let ids: Vec<_> = params.ids().collect();
    max_param_error(&params, &ids, SAMPLES_PER_TENSOR, |t| {
        let xv = t.input(x.clone());
        let stages = enc.forward(t, xv);
        let pooled: Vec<_> = stages.iter().map(|&s| t.global_avg_pool(s)).collect();
        let out = t.concat(&pooled);
        let n = t.value(out).len();
        t.dot(out, &probe_weights(n, 73))
    })
}
