//! Difference-aware segmentation of shared-probe pairs.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::CnnEncoder;
use crate::corrdino::{DenoiserConfig, MultiAspectDenoiser};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor, ProbabilityMask, MIN_SIDE};
use crate::nn::{Builder, ParamSet};
use crate::real::Real;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;
use crate::train::Objective;

/// Channel-mean absolute difference of two aligned images, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

/// Bilinearly resizes `reference` to the size of `probe` when they differ.
pub fn align_reference(probe: &ImageTensor, reference: &ImageTensor) -> ImageTensor {
    if probe.size() == reference.size() {
        reference.clone()
    } else {
        let (h, w) = probe.size();
        reference.resize(h, w)
    }
}

pub fn difference_map(probe: &ImageTensor, reference: &ImageTensor) -> Result<DifferenceMap> {
    if probe.size() != reference.size() {
        return Err(Error::SizeMismatch { expected: probe.size(), actual: reference.size() });
    }
    let (h, w) = probe.size();
    let n = h * w;
    let (a, b) = (probe.data(), reference.data());
    let data = (0..n)
        .map(|i| ((a[i] - b[i]).abs() + (a[n + i] - b[n + i]).abs() + (a[2 * n + i] - b[2 * n + i]).abs()) / 3.0)
        .collect();
    Ok(DifferenceMap { width: w, height: h, data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Otsu {
    /// `None` when the map is constant (no split exists).
    pub threshold: Option<f32>,
    pub mask: BinaryMask,
}

/// Histogram bin of a `[0, 1]` value on the 8-bit grid.
pub fn otsu_bin(v: f32) -> usize {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as usize
}

/// Best split bin `t` (classes `bin <= t` and `bin > t`) of a 256-bin histogram.
pub fn otsu_split(hist: &[u64; 256]) -> Option<usize> {
    let total: u64 = hist.iter().sum();
    let sum: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let (mut w0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, f64)> = None;
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c;
        s0 += t as u64 * c;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        // w0·w1·(μ0 − μ1)² = (w1·s0 − w0·s1)² / (w0·w1)
        let d = (w1 as i128) * (s0 as i128) - (w0 as i128) * ((sum - s0) as i128);
        let score = (d as f64) * (d as f64) / (w0 as f64 * w1 as f64);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((t, score));
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu binarization over a 256-bin histogram; pixels strictly above the
/// threshold are set.
pub fn otsu_threshold(map: &DifferenceMap) -> Otsu {
    let mut hist = [0u64; 256];
    for &v in &map.data {
        hist[otsu_bin(v)] += 1;
    }
    match otsu_split(&hist) {
        None => Otsu { threshold: None, mask: BinaryMask::zeros(map.width, map.height) },
        Some(t) => {
            let threshold = (t as f32 + 0.5) / 255.0;
            let mask = BinaryMask::from_vec(map.width, map.height, map.data.iter().map(|&v| (v > threshold) as u8).collect());
            Otsu { threshold: Some(threshold), mask }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DassConfig {
    pub encoder_channels: [usize; 4],
    pub denoiser: DenoiserConfig,
}

impl Default for DassConfig {
    fn default() -> Self {
        Self { encoder_channels: [64, 128, 256, 512], denoiser: DenoiserConfig { width: 128, branch_width: 64 } }
    }
}

impl DassConfig {
    /// Small widths used by tests and desk-scale runs.
    pub fn desk() -> Self {
        Self { encoder_channels: [16, 24, 32, 48], denoiser: DenoiserConfig { width: 16, branch_width: 8 } }
    }
}

/// Seven-channel input `[probe, reference, |probe − reference|]` after
/// reflection padding to a multiple of 32.
pub fn dass_input<T: Real>(probe: &ImageTensor, reference: &ImageTensor) -> Result<Tensor<T>> {
    let reference = align_reference(probe, reference);
    let p = probe.reflect_pad_to_multiple(32);
    let r = reference.reflect_pad_to_multiple(32);
    let diff = difference_map(&p, &r)?;
    let mut data: Vec<T> = Vec::with_capacity(7 * diff.data.len());
    data.extend(p.data().iter().map(|&v| T::lit(v as f64)));
    data.extend(r.data().iter().map(|&v| T::lit(v as f64)));
    data.extend(diff.data.iter().map(|&v| T::lit(v as f64)));
    Ok(Tensor::from_vec(&[7, diff.height, diff.width], data))
}

pub struct DassModel<T: Real> {
    pub config: DassConfig,
    pub params: ParamSet<T>,
    encoder: CnnEncoder,
    denoiser: MultiAspectDenoiser,
}

impl<T: Real> DassModel<T> {
    pub fn new(config: DassConfig, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let encoder = CnnEncoder::new(&mut b, 7, config.encoder_channels);
        let denoiser = MultiAspectDenoiser::new(&mut b, config.encoder_channels, config.denoiser);
        Self { config, params, encoder, denoiser }
    }

    /// Logits at `size` (the unpadded probe size) for a prepared input.
    pub fn logits(&self, tape: &mut Tape<'_, T>, input: &Tensor<T>, size: (usize, usize)) -> Var {
        let (_, ph, pw) = input.chw();
        let x = tape.input(input.clone());
        let pyramid = self.encoder.forward(tape, x);
        let logits = self.denoiser.forward(tape, pyramid);
        let full = tape.resize(logits, ph, pw);
        tape.crop(full, size.0, size.1)
    }

    pub fn loss(&self, tape: &mut Tape<'_, T>, input: &Tensor<T>, mask: &BinaryMask) -> Var {
        let logits = self.logits(tape, input, mask.size());
        let target: Vec<T> = mask.data().iter().map(|&v| T::lit(v as f64)).collect();
        tape.bce_with_logits(logits, &target)
    }

    pub fn predict_input(&self, input: &Tensor<T>, size: (usize, usize)) -> ProbabilityMask {
        let mut tape = Tape::new(&self.params);
        let logits = self.logits(&mut tape, input, size);
        let data = tape.value(logits).data().iter().map(|&z| sigmoid(z).as_f32()).collect();
        ProbabilityMask::new(size.1, size.0, data).expect("sigmoid output lies in [0, 1]")
    }
}

pub fn dass_forward<T: Real>(probe: &ImageTensor, reference: &ImageTensor, model: &DassModel<T>) -> Result<ProbabilityMask> {
    probe.validate(MIN_SIDE)?;
    reference.validate(MIN_SIDE)?;
    let input = dass_input(probe, reference)?;
    Ok(model.predict_input(&input, probe.size()))
}

#[derive(Clone, Debug)]
pub struct DassSample {
    pub input: Tensor<f32>,
    pub mask: BinaryMask,
}

impl DassSample {
    pub fn new(probe: &ImageTensor, reference: &ImageTensor, mask: BinaryMask) -> Result<Self> {
        if mask.size() != probe.size() {
            return Err(Error::SizeMismatch { expected: probe.size(), actual: mask.size() });
        }
        Ok(Self { input: dass_input(probe, reference)?, mask })
    }
}

impl Objective for DassModel<f32> {
    type Sample = DassSample;

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<'_, f32>, sample: &DassSample) -> Option<Var> {
        Some(DassModel::loss(self, tape, &sample.input, &sample.mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_offset_gives_constant_map() {
        let a = ImageTensor::filled(32, 32, [0.2, 0.3, 0.4]);
        let b = ImageTensor::filled(32, 32, [0.3, 0.4, 0.5]);
        let d = difference_map(&a, &b).unwrap();
        assert!(d.data.iter().all(|&v| (v - 0.1).abs() < 1e-6));
    }

    #[test]
    fn constant_map_is_flagged() {
        let d = DifferenceMap { width: 4, height: 4, data: alloc::vec![0.0; 16] };
        let o = otsu_threshold(&d);
        assert_eq!(o.threshold, None);
        assert_eq!(o.mask.area(), 0);
    }

    #[test]
    fn two_populations_split_exactly() {
        let data: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 10.0 / 255.0 } else { 200.0 / 255.0 }).collect();
        let d = DifferenceMap { width: 8, height: 8, data };
        let o = otsu_threshold(&d);
        let t = o.threshold.unwrap();
        assert!(t > 10.0 / 255.0 && t < 200.0 / 255.0);
        assert_eq!(o.mask.area(), 32);
        let again = DifferenceMap { width: 8, height: 8, data: o.mask.data().iter().map(|&v| v as f32).collect() };
        assert_eq!(otsu_threshold(&again).mask, o.mask);
    }

    #[test]
    fn output_matches_probe_size() {
        let model = DassModel::<f32>::new(DassConfig::desk(), 3);
        let a = ImageTensor::filled(40, 36, [0.5; 3]);
        let b = ImageTensor::filled(48, 48, [0.4; 3]);
        let m = dass_forward(&a, &b, &model).unwrap();
        assert_eq!(m.size(), (36, 40));
    }
}
