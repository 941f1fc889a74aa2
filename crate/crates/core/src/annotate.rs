//! Category-aware auto-annotation: route a pair, segment it with the
//! matching model and score the result.

use alloc::string::{String, ToString};

use crate::corrdino::{corr_dino_forward, CorrDino};
use crate::dass::{dass_forward, DassModel};
use crate::error::Result;
use crate::image::{ImageTensor, ProbabilityMask};
use crate::pairs::{classify_pair, route, PairClassifier, PairGroup};
use crate::qes::{is_retained, qes_score, QesConfig};

/// The three annotation models behind one interface.
pub trait Annotator {
    /// Probability that the pair is shared-probe.
    fn classify(&self, probe: &ImageTensor, reference: &ImageTensor) -> Result<f32>;
    fn segment_spg(&self, probe: &ImageTensor, reference: &ImageTensor) -> Result<ProbabilityMask>;
    /// Probe-side mask of a shared-donor pair.
    fn segment_sdg(&self, probe: &ImageTensor, reference: &ImageTensor) -> Result<ProbabilityMask>;
}

pub struct Models<'a> {
    pub classifier: &'a PairClassifier<f32>,
    pub dass: &'a DassModel<f32>,
    pub corrdino: &'a CorrDino<f32>,
}

impl Annotator for Models<'_> {
    fn classify(&self, probe: &ImageTensor, reference: &ImageTensor) -> Result<f32> {
        classify_pair(probe, reference, self.classifier)
    }

    fn segment_spg(&self, probe: &ImageTensor, reference: &ImageTensor) -> Result<ProbabilityMask> {
        dass_forward(probe, reference, self.dass)
    }

    fn segment_sdg(&self, probe: &ImageTensor, reference: &ImageTensor) -> Result<ProbabilityMask> {
        corr_dino_probe_mask(probe, reference, self.corrdino)
    }
}

/// Probe-side mask at the probe's resolution. The pair is resampled to the
/// token grid the model was built for.
pub fn corr_dino_probe_mask(probe: &ImageTensor, reference: &ImageTensor, model: &CorrDino<f32>) -> Result<ProbabilityMask> {
    let (h, w) = grid_input_size(model);
    let (mask, _) = corr_dino_forward(&probe.resize(h, w), &reference.resize(h, w), model)?;
    let (ph, pw) = probe.size();
    Ok(mask.resize(ph, pw))
}

/// Image size `(h, w)` whose tokens exactly fill the model's grid.
pub fn grid_input_size<T: crate::Real>(model: &CorrDino<T>) -> (usize, usize) {
    let stride = model.backend().strides()[0];
    let (gh, gw) = model.config.grid;
    (gh * stride, gw * stride)
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnnotationStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub group: Option<PairGroup>,
    pub spg_probability: Option<f32>,
    pub mask: Option<ProbabilityMask>,
    pub qes: f64,
    pub retained: bool,
    pub status: AnnotationStatus,
}

impl Annotation {
    fn failed(group: Option<PairGroup>, p: Option<f32>, e: impl ToString) -> Self {
        Self { group, spg_probability: p, mask: None, qes: 0.0, retained: false, status: AnnotationStatus::Failed(e.to_string()) }
    }
}

/// Any model error yields a failed annotation without a mask.
pub fn annotate_pair(probe: &ImageTensor, reference: &ImageTensor, models: &dyn Annotator, cfg: &QesConfig) -> Annotation {
    let p = match models.classify(probe, reference) {
        Ok(p) => p,
        Err(e) => return Annotation::failed(None, None, e),
    };
    let group = route(p);
    let mask = match group {
        PairGroup::Spg => models.segment_spg(probe, reference),
        PairGroup::Sdg => models.segment_sdg(probe, reference),
    };
    let mask = match mask {
        Ok(m) => m,
        Err(e) => return Annotation::failed(Some(group), Some(p), e),
    };
    match qes_score(&mask, cfg) {
        Ok(qes) => Annotation { group: Some(group), spg_probability: Some(p), mask: Some(mask), qes, retained: is_retained(qes, cfg), status: AnnotationStatus::Ok },
        Err(e) => Annotation::failed(Some(group), Some(p), e),
    }
}
