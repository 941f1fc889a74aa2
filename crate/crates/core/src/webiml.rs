//! The rectifying localization network: multi-scale perception over a
//! four-stage pyramid, then rounds of self-rectification with nested
//! channel attention.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackendHandle, BackendKind, CnnEncoder, FeaturePyramid};
use crate::corrdino::DILATIONS;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor, ProbabilityMask, MIN_SIDE};
use crate::nn::{Builder, Conv2d, ParamSet};
use crate::real::Real;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;
use crate::train::Objective;

pub const POOL_SIZES: [usize; 4] = [1, 2, 3, 6];

#[derive(Clone, Debug)]
pub struct MultiScalePerception {
    global: Vec<Conv2d>,
    top: Conv2d,
    lateral: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
}

impl MultiScalePerception {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, in_channels: [usize; 4], width: usize) -> Self {
        b.scoped("perception", |b| {
            let global = POOL_SIZES.iter().map(|s| b.conv_same(&format!("global{s}"), in_channels[3], width, 1, 1)).collect();
            let top = b.conv_same("top", in_channels[3] + 4 * width, width, 3, 1);
            let lateral = (0..3).map(|n| b.conv_same(&format!("lateral{n}"), in_channels[n], width, 1, 1)).collect();
            let fuse = (0..3).map(|n| b.conv_same(&format!("fuse{n}"), width, width, 3, 1)).collect();
            Self { global, top, lateral, fuse }
        })
    }

    /// Fused maps `F'_1..F'_4` at the pyramid's resolutions, finest first.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, pyramid: [Var; 4]) -> [Var; 4] {
        let f4 = pyramid[3];
        let (_, h4, w4) = tape.shape(f4);
        let mut parts: Vec<Var> = POOL_SIZES
            .iter()
            .zip(&self.global)
            .map(|(&s, conv)| {
                let pooled = tape.adaptive_avg_pool(f4, s);
                let g = conv.forward_relu(tape, pooled);
                tape.resize(g, h4, w4)
            })
            .collect();
        parts.push(f4);
        let cat = tape.concat(&parts);
        let mut fused = pyramid;
        fused[3] = self.top.forward_relu(tape, cat);
        for n in (0..3).rev() {
            let (_, h, w) = tape.shape(pyramid[n]);
            let up = tape.resize(fused[n + 1], h, w);
            let lat = self.lateral[n].forward(tape, pyramid[n]);
            let sum = tape.add(up, lat);
            fused[n] = self.fuse[n].forward_relu(tape, sum);
        }
        fused
    }
}

/// Bias-free two-level squeeze gate: `F_o = F_c · σ(W4 (G1 ⊙ σ(W3 W2 G1)))`
/// with `G1 = W1 · avg(F_c)`.
#[derive(Clone, Debug)]
pub struct NestedChannelAttention {
    w: [Conv2d; 4],
}

pub const NCA_REDUCTION: usize = 4;

impl NestedChannelAttention {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize) -> Self {
        let c1 = (channels / NCA_REDUCTION).max(1);
        let c2 = (c1 / NCA_REDUCTION).max(1);
        b.scoped("attention", |b| Self {
            w: [b.linear("w1", channels, c1), b.linear("w2", c1, c2), b.linear("w3", c2, c1), b.linear("w4", c1, channels)],
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, fc: Var) -> Var {
        let avg = tape.global_avg_pool(fc);
        let g1 = self.w[0].forward(tape, avg);
        let g2 = self.w[1].forward(tape, g1);
        let z2 = self.w[2].forward(tape, g2);
        let a2 = tape.sigmoid(z2);
        let gated = tape.mul(g1, a2);
        let z1 = self.w[3].forward(tape, gated);
        let a1 = tape.sigmoid(z1);
        tape.mul_channel(fc, a1)
    }
}

/// One rectification round with its own parameters.
#[derive(Clone, Debug)]
pub struct SelfRectification {
    rfm: Vec<Conv2d>,
    fuse: Conv2d,
    attention: NestedChannelAttention,
    dilated: Vec<Conv2d>,
    merge: Conv2d,
    head: Conv2d,
}

impl SelfRectification {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, name: &str, width: usize) -> Self {
        b.scoped(name, |b| {
            let mid = (width / 2).max(1);
            let dims = [1, mid, mid, mid, mid, width];
            let rfm = (0..5).map(|i| b.conv_same(&format!("rfm{i}"), dims[i], dims[i + 1], 3, 1)).collect();
            let fuse = b.conv_same("fuse", 2 * width, width, 3, 1);
            let attention = NestedChannelAttention::new(b, width);
            let dilated = DILATIONS.iter().map(|&d| b.conv_same(&format!("dilated{d}"), width, width, 3, d)).collect();
            let merge = b.conv_same("merge", 4 * width, width, 3, 1);
            let head = b.conv_same("head", width, 1, 1, 1);
            Self { rfm, fuse, attention, dilated, merge, head }
        })
    }

    /// Takes features and the previous prediction logits; returns the
    /// rectified features and new logits.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, fa: Var, p_logits: Var) -> (Var, Var) {
        let mut fr = tape.sigmoid(p_logits);
        for conv in &self.rfm {
            fr = conv.forward_relu(tape, fr);
        }
        let cat = tape.concat(&[fa, fr]);
        let fc = self.fuse.forward_relu(tape, cat);
        let fo = self.attention.forward(tape, fc);
        let branches: Vec<Var> = self.dilated.iter().map(|c| c.forward_relu(tape, fo)).collect();
        let joined = tape.concat(&branches);
        let fo = self.merge.forward_relu(tape, joined);
        let p = self.head.forward(tape, fo);
        (fo, p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WebImlEncoder {
    /// Features from a registered pyramid backend, treated as constants.
    Backend(String),
    /// Trainable convolutional encoder with the given stage widths.
    Cnn([usize; 4]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WebImlConfig {
    pub encoder: WebImlEncoder,
    pub width: usize,
    pub rounds: usize,
    /// When false the network stops at the initial prediction.
    pub self_rectification: bool,
}

impl WebImlConfig {
    pub fn new(encoder: WebImlEncoder) -> Self {
        Self { encoder, width: 256, rounds: 2, self_rectification: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.width == 0 {
            return Err(Error::Config(format!("rounds and width must be positive (rounds {}, width {})", self.rounds, self.width)));
        }
        Ok(())
    }
}

/// Network input: the image's padded extent plus either backend features or
/// the padded image itself.
#[derive(Clone, Debug)]
pub struct WebImlInput {
    pub size: (usize, usize),
    pub padded: (usize, usize),
    pub features: Vec<Tensor<f32>>,
}

pub struct WebIml<T: Real> {
    pub config: WebImlConfig,
    pub params: ParamSet<T>,
    backend: Option<BackendHandle>,
    encoder: Option<CnnEncoder>,
    perception: MultiScalePerception,
    initial_head: Conv2d,
    rounds: Vec<SelfRectification>,
}

impl<T: Real> WebIml<T> {
    /// `backend` is required for [`WebImlEncoder::Backend`] and ignored otherwise.
    pub fn new(config: WebImlConfig, backend: Option<BackendHandle>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let (backend, encoder, channels) = match &config.encoder {
            WebImlEncoder::Backend(id) => {
                let backend = backend.ok_or_else(|| Error::UnknownBackend(id.clone()))?;
                if backend.id() != id {
                    return Err(Error::Config(format!("backend `{}` does not match config `{id}`", backend.id())));
                }
                if backend.kind() != BackendKind::Pyramid {
                    return Err(Error::BackendKind { id: id.clone(), expected: "pyramid", actual: backend.kind().as_str() });
                }
                let ch = backend.channels();
                let channels = [ch[0], ch[1], ch[2], ch[3]];
                (Some(backend), None, channels)
            }
            WebImlEncoder::Cnn(ch) => (None, Some(CnnEncoder::new(&mut b, 3, *ch)), *ch),
        };
        let perception = MultiScalePerception::new(&mut b, channels, config.width);
        let initial_head = b.conv_same("initial_head", config.width, 1, 1, 1);
        let rounds = (0..config.rounds).map(|r| SelfRectification::new(&mut b, &format!("round{r}"), config.width)).collect();
        Ok(Self { config, params, backend, encoder, perception, initial_head, rounds })
    }

    pub fn prepare(&self, image: &ImageTensor) -> Result<WebImlInput> {
        image.validate(MIN_SIDE)?;
        let padded = image.reflect_pad_to_multiple(32);
        let features = match &self.backend {
            Some(backend) => {
                let pyr: FeaturePyramid = crate::backbone::extract_pyramid_features(image, backend.as_ref())?;
                pyr.stages
            }
            None => alloc::vec![padded.to_tensor()],
        };
        Ok(WebImlInput { size: image.size(), padded: padded.size(), features })
    }

    /// Logits of every head at image resolution: the initial prediction,
    /// then one per rectification round.
    pub fn head_logits(&self, tape: &mut Tape<'_, T>, input: &WebImlInput) -> Vec<Var> {
        let pyramid = match &self.encoder {
            Some(enc) => {
                let x = tape.input(Tensor::cast(&input.features[0]));
                enc.forward(tape, x)
            }
            None => {
                let v: Vec<Var> = input.features.iter().map(|f| tape.input(Tensor::cast(f))).collect();
                [v[0], v[1], v[2], v[3]]
            }
        };
        let fused = self.perception.forward(tape, pyramid);
        let mut p = self.initial_head.forward(tape, fused[0]);
        let mut heads = alloc::vec![p];
        if self.config.self_rectification {
            let mut fa = fused[0];
            for round in &self.rounds {
                (fa, p) = round.forward(tape, fa, p);
                heads.push(p);
            }
        }
        heads
            .into_iter()
            .map(|h| {
                let full = tape.resize(h, input.padded.0, input.padded.1);
                tape.crop(full, input.size.0, input.size.1)
            })
            .collect()
    }

    /// Equal-weight cross entropy summed over all heads.
    pub fn loss(&self, tape: &mut Tape<'_, T>, input: &WebImlInput, mask: &BinaryMask) -> Var {
        let target: Vec<T> = mask.data().iter().map(|&v| T::lit(v as f64)).collect();
        let heads = self.head_logits(tape, input);
        let mut total = tape.bce_with_logits(heads[0], &target);
        for &h in &heads[1..] {
            let l = tape.bce_with_logits(h, &target);
            total = tape.add(total, l);
        }
        total
    }

    pub fn predict_input(&self, input: &WebImlInput) -> ProbabilityMask {
        let mut tape = Tape::new(&self.params);
        let heads = self.head_logits(&mut tape, input);
        let last = *heads.last().expect("at least one head");
        let data = tape.value(last).data().iter().map(|&z| sigmoid(z).as_f32()).collect();
        ProbabilityMask::new(input.size.1, input.size.0, data).expect("sigmoid output lies in [0, 1]")
    }
}

pub fn web_iml_forward<T: Real>(image: &ImageTensor, model: &WebIml<T>) -> Result<ProbabilityMask> {
    let input = model.prepare(image)?;
    Ok(model.predict_input(&input))
}

#[derive(Clone, Debug)]
pub struct WebImlSample {
    pub input: WebImlInput,
    pub mask: BinaryMask,
}

impl Objective for WebIml<f32> {
    type Sample = WebImlSample;

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<'_, f32>, sample: &WebImlSample) -> Option<Var> {
        Some(WebIml::loss(self, tape, &sample.input, &sample.mask))
    }
}
