use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use super::{check_patch, tensors_to_bytes, BackendKind, FeatureBackend, FeaturePyramid, PYRAMID_STRIDES};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::nn::{Builder, Conv2d, ParamSet};
use crate::real::Real;
use crate::tape::{ConvGeom, Tape, Var};

const DOWN: ConvGeom = ConvGeom { stride: 2, padding: 1, dilation: 1 };

/// Small trainable four-stage convolutional encoder (strides 4/8/16/32).
///
/// The input must already be padded to a multiple of 32.
#[derive(Clone, Debug)]
pub struct CnnEncoder {
    stages: Vec<Vec<Conv2d>>,
    channels: [usize; 4],
}

impl CnnEncoder {
    pub fn new<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, in_channels: usize, channels: [usize; 4]) -> Self {
        let mut stages = Vec::new();
        b.scoped("encoder", |b| {
            stages.push(alloc::vec![
                b.conv("stem0", in_channels, channels[0], 3, DOWN, true),
                b.conv("stem1", channels[0], channels[0], 3, DOWN, true),
                b.conv_same("stage0", channels[0], channels[0], 3, 1),
            ]);
            for i in 1..4 {
                stages.push(alloc::vec![
                    b.conv(&alloc::format!("down{i}"), channels[i - 1], channels[i], 3, DOWN, true),
                    b.conv_same(&alloc::format!("stage{i}"), channels[i], channels[i], 3, 1),
                ]);
            }
        });
        Self { stages, channels }
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> [Var; 4] {
        let mut h = x;
        let mut out = [x; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            for conv in stage {
                h = conv.forward_relu(tape, h);
            }
            out[i] = h;
        }
        out
    }
}

/// A trained [`CnnEncoder`] snapshot exposed through the backend contract (3-channel input).
pub struct CnnBackend {
    id: String,
    encoder: CnnEncoder,
    params: ParamSet<f32>,
}

impl CnnBackend {
    pub fn new(id: &str, encoder: CnnEncoder, params: ParamSet<f32>) -> Self {
        Self { id: id.into(), encoder, params }
    }

    pub fn random<R: Rng>(id: &str, channels: [usize; 4], rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let encoder = CnnEncoder::new(&mut Builder::new(&mut params, rng), 3, channels);
        Self::new(id, encoder, params)
    }
}

impl FeatureBackend for CnnBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Pyramid
    }

    fn channels(&self) -> Vec<usize> {
        self.encoder.channels.to_vec()
    }

    fn strides(&self) -> Vec<usize> {
        PYRAMID_STRIDES.to_vec()
    }

    fn frozen(&self) -> bool {
        false
    }

    fn extract_pyramid(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        check_patch(image, 1)?;
        let padded = image.reflect_pad_to_multiple(32);
        let mut tape = Tape::new(&self.params);
        let x = tape.input(padded.to_tensor());
        let vars = self.encoder.forward(&mut tape, x);
        Ok(FeaturePyramid { stages: vars.iter().map(|&v| tape.value(v).clone()).collect() })
    }

    fn parameter_bytes(&self) -> Vec<u8> {
        tensors_to_bytes(self.params.iter().map(|p| &p.value))
    }
}
