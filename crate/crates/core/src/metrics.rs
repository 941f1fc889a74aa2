//! Localization metrics and the robustness perturbations.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, sigma_for_kernel, BinaryMask, ImageTensor, ProbabilityMask};
use crate::jpeg::JpegCodec;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// `1` where `p > threshold`.
pub fn binarize(mask: &ProbabilityMask, threshold: f32) -> BinaryMask {
    BinaryMask::from_vec(mask.width(), mask.height(), mask.data().iter().map(|&p| (p > threshold) as u8).collect())
}

fn check_sizes(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::SizeMismatch { expected: b, actual: a });
    }
    Ok(())
}

fn counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_sizes(pred.size(), gt.size())?;
    Ok((pred.intersection_area(gt), pred.area(), gt.area()))
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Binary F1; two empty masks score 1.
pub fn f1(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    Ok(if p + g == 0 { 1.0 } else { 2.0 * inter as f64 / (p + g) as f64 })
}

/// Area under the pixel-level ROC curve (ties count half).
pub fn pixel_auc(pred: &ProbabilityMask, gt: &BinaryMask) -> Result<f64> {
    check_sizes(pred.size(), gt.size())?;
    let positives = gt.area();
    let negatives = gt.data().len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<(f32, bool)> = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p, g != 0)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    // average ranks over tie groups (1-based)
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && order[j].0 == order[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * order[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    /// Bilinear downscale by a factor in `(0, 1]`.
    Resize(f64),
    /// Gaussian blur with an odd kernel size.
    Blur(usize),
    /// JPEG round trip at a quality in `1..=100`.
    Jpeg(u8),
}

impl Perturbation {
    /// Parses `kind=param`, e.g. `resize=0.25`, `blur=15`, `jpeg=50`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, value) = spec.split_once('=').ok_or_else(|| Error::Config(format!("expected kind=param, got `{spec}`")))?;
        let bad = || Error::Config(format!("illegal perturbation parameter `{value}` for {kind}"));
        let p = match kind.trim() {
            "resize" => Perturbation::Resize(value.trim().parse().map_err(|_| bad())?),
            "blur" => Perturbation::Blur(value.trim().parse().map_err(|_| bad())?),
            "jpeg" => Perturbation::Jpeg(value.trim().parse().map_err(|_| bad())?),
            other => return Err(Error::Config(format!("unknown perturbation `{other}`"))),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Perturbation::Resize(s) => s > 0.0 && s <= 1.0,
            Perturbation::Blur(k) => k % 2 == 1 && k <= 99,
            Perturbation::Jpeg(q) => (1..=100).contains(&q),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("illegal perturbation {}", self.describe())))
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Perturbation::Resize(s) => format!("resize={s}"),
            Perturbation::Blur(k) => format!("blur={k}"),
            Perturbation::Jpeg(q) => format!("jpeg={q}"),
        }
    }

    fn scaled(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            Perturbation::Resize(s) => ((libm::round(h as f64 * s) as usize).max(1), (libm::round(w as f64 * s) as usize).max(1)),
            _ => (h, w),
        }
    }

    pub fn apply(&self, image: &ImageTensor, codec: &dyn JpegCodec) -> Result<ImageTensor> {
        self.validate()?;
        let (h, w) = image.size();
        Ok(match *self {
            Perturbation::Resize(_) => {
                let (nh, nw) = self.scaled(h, w);
                image.resize(nh, nw)
            }
            Perturbation::Blur(k) => {
                if k == 1 {
                    return Ok(image.clone());
                }
                let data = gaussian_blur(image.data(), 3, h, w, sigma_for_kernel(k), k / 2);
                ImageTensor::from_raw(w, h, data)
            }
            Perturbation::Jpeg(q) => codec.roundtrip(image, q),
        })
    }

    /// Ground truth matching the perturbed image geometry (nearest neighbour).
    pub fn apply_to_mask(&self, mask: &BinaryMask) -> BinaryMask {
        let (h, w) = self.scaled(mask.height(), mask.width());
        if (h, w) == mask.size() {
            mask.clone()
        } else {
            mask.resize_nearest(h, w)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub iou: f64,
    pub f1: f64,
    /// `None` when the ground truth has a single class.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleScores>,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub mean_auc: Option<f64>,
    pub threshold: f32,
    pub perturbation: Option<String>,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleScores>, threshold: f32, perturbation: Option<&Perturbation>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean_iou = samples.iter().map(|s| s.iou).sum::<f64>() / n;
        let mean_f1 = samples.iter().map(|s| s.f1).sum::<f64>() / n;
        let aucs: Vec<f64> = samples.iter().filter_map(|s| s.auc).collect();
        let mean_auc = (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64);
        Self { samples, mean_iou, mean_f1, mean_auc, threshold, perturbation: perturbation.map(|p| p.describe()) }
    }

    /// One `key=value` line per sample followed by a summary line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let pert = self.perturbation.clone().unwrap_or_else(|| "none".to_string());
        for (i, s) in self.samples.iter().enumerate() {
            let auc = s.auc.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
            out.push_str(&format!("sample={i} iou={:.6} f1={:.6} auc={auc}\n", s.iou, s.f1));
        }
        let auc = self.mean_auc.map_or_else(|| "nan".to_string(), |a| format!("{a:.6}"));
        out.push_str(&format!(
            "summary samples={} threshold={} perturbation={pert} mean_iou={:.6} mean_f1={:.6} mean_auc={auc}\n",
            self.samples.len(),
            self.threshold,
            self.mean_iou,
            self.mean_f1
        ));
        out
    }
}

pub fn score_sample(pred: &ProbabilityMask, gt: &BinaryMask, threshold: f32) -> Result<SampleScores> {
    let bin = binarize(pred, threshold);
    let auc = match pixel_auc(pred, gt) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleScores { iou: iou(&bin, gt)?, f1: f1(&bin, gt)?, auc })
}

/// Runs `predict` over `(image, ground truth)` pairs, optionally perturbing
/// each input first; ground truth follows the perturbed geometry.
pub fn evaluate<F>(
    predict: F,
    samples: &[(ImageTensor, Option<BinaryMask>)],
    perturbation: Option<&Perturbation>,
    codec: &dyn JpegCodec,
    threshold: f32,
) -> Result<EvalReport>
where
    F: Fn(&ImageTensor) -> Result<ProbabilityMask>,
{
    let mut scores = Vec::with_capacity(samples.len());
    for (i, (image, gt)) in samples.iter().enumerate() {
        let gt = gt.as_ref().ok_or(Error::MissingGroundTruth(i))?;
        let (input, gt) = match perturbation {
            Some(p) => (p.apply(image, codec)?, p.apply_to_mask(gt)),
            None => (image.clone(), gt.clone()),
        };
        let pred = predict(&input)?;
        scores.push(score_sample(&pred, &gt, threshold)?);
    }
    Ok(EvalReport::from_samples(scores, threshold, perturbation))
}
