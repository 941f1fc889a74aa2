//! Self-supervised pair synthesis and the shared-probe / shared-donor
//! routing classifier.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::jpeg::JpegCodec;
use crate::nn::{Builder, Conv2d, ParamSet};
use crate::real::Real;
use crate::tape::{sigmoid, ConvGeom, Tape, Var};
use crate::tensor::Tensor;
use crate::train::Objective;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairGroup {
    /// Shared probe: the probe is an in-place edit of the reference.
    Spg,
    /// Shared donor: regions of the reference were pasted into another image.
    Sdg,
}

impl PairGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            PairGroup::Spg => "SPG",
            PairGroup::Sdg => "SDG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "SPG" => Some(PairGroup::Spg),
            "SDG" => Some(PairGroup::Sdg),
            _ => None,
        }
    }
}

/// An axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn overlaps(&self, o: &Rect) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn mask(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::rect(width, height, self.y, self.x, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Operation {
    CopyPaste { from: Rect, to: Rect },
    Splice { to: Rect },
    Removal { region: Rect },
    /// Region `from` of the reference pasted at `to` in the probe after resizing.
    DonorPaste { from: Rect, to: Rect },
    ColorJitter { brightness: f32, contrast: f32 },
    ResizeJitter { scale: f32 },
    Jpeg { quality: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub probe: ImageTensor,
    pub reference: ImageTensor,
    pub group: PairGroup,
    pub gt_mask: Option<BinaryMask>,
    /// Source regions on the reference (shared-donor pairs only).
    pub reference_mask: Option<BinaryMask>,
    pub provenance: Vec<Operation>,
}

fn random_rect<R: Rng>(rng: &mut R, height: usize, width: usize, min_frac: f32, max_frac: f32) -> Rect {
    let side = height.min(width) as f32;
    let h = (rng.random_range(min_frac..max_frac) * side) as usize;
    let w = (rng.random_range(min_frac..max_frac) * side) as usize;
    let (h, w) = (h.clamp(4, height), w.clamp(4, width));
    Rect { y: rng.random_range(0..=height - h), x: rng.random_range(0..=width - w), h, w }
}

/// Writes `patch` into `image` with its top-left corner at `(y, x)`.
pub fn paste(image: &mut ImageTensor, patch: &ImageTensor, y: usize, x: usize) {
    for c in 0..3 {
        for py in 0..patch.height() {
            for px in 0..patch.width() {
                image.set(c, y + py, x + px, patch.get(c, py, px));
            }
        }
    }
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[values.len() / 2]
}

/// Fills `region` with the median color of the ring around it, feathered
/// towards the original content over a few pixels inside the border.
pub fn remove_region(image: &mut ImageTensor, region: Rect) {
    let (h, w) = image.size();
    let ring = 3usize;
    let (y0, x0) = (region.y.saturating_sub(ring), region.x.saturating_sub(ring));
    let (y1, x1) = ((region.y + region.h + ring).min(h), (region.x + region.w + ring).min(w));
    let inside = |y: usize, x: usize| y >= region.y && y < region.y + region.h && x >= region.x && x < region.x + region.w;
    let mut fill = [0.0f32; 3];
    for (c, f) in fill.iter_mut().enumerate() {
        let mut vals: Vec<f32> = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                if !inside(y, x) {
                    vals.push(image.get(c, y, x));
                }
            }
        }
        *f = if vals.is_empty() { 0.5 } else { median(&mut vals) };
    }
    let feather = 3.0f32;
    for y in region.y..region.y + region.h {
        for x in region.x..region.x + region.w {
            let d = (y - region.y).min(region.y + region.h - 1 - y).min(x - region.x).min(region.x + region.w - 1 - x) as f32;
            let alpha = ((d + 1.0) / feather).min(1.0);
            for (c, &f) in fill.iter().enumerate() {
                let v = image.get(c, y, x);
                image.set(c, y, x, alpha * f + (1.0 - alpha) * v);
            }
        }
    }
}

/// Local edit of a shared-probe pair, before global augmentation.
pub fn manipulate<R: Rng>(image: &ImageTensor, splice_source: Option<&ImageTensor>, rng: &mut R) -> (ImageTensor, BinaryMask, Operation) {
    let (h, w) = image.size();
    let to = random_rect(rng, h, w, 0.15, 0.4);
    let mut out = image.clone();
    let kinds = if splice_source.is_some() { 3 } else { 2 };
    let op = match rng.random_range(0..kinds) {
        0 => {
            let mut from = random_rect(rng, h, w, 0.15, 0.4);
            from.h = to.h;
            from.w = to.w;
            from.y = rng.random_range(0..=h - to.h);
            from.x = rng.random_range(0..=w - to.w);
            let patch = image.crop(from.y, from.x, from.h, from.w);
            paste(&mut out, &patch, to.y, to.x);
            Operation::CopyPaste { from, to }
        }
        1 => {
            remove_region(&mut out, to);
            Operation::Removal { region: to }
        }
        _ => {
            let src = splice_source.expect("splice source present").resize(h, w);
            let sy = rng.random_range(0..=h - to.h);
            let sx = rng.random_range(0..=w - to.w);
            paste(&mut out, &src.crop(sy, sx, to.h, to.w), to.y, to.x);
            Operation::Splice { to }
        }
    };
    (out, to.mask(w, h), op)
}

/// Global brightness/contrast, resize and JPEG augmentation.
pub fn augment<R: Rng>(image: &ImageTensor, codec: &dyn JpegCodec, rng: &mut R) -> (ImageTensor, Vec<Operation>) {
    let (h, w) = image.size();
    let brightness = rng.random_range(0.9f32..=1.1);
    let contrast = rng.random_range(0.9f32..=1.1);
    let mean = image.data().iter().sum::<f32>() / image.data().len() as f32;
    let data = image.data().iter().map(|&v| ((v - mean) * contrast + mean) * brightness).collect();
    let mut out = ImageTensor::from_raw(w, h, data);
    let scale = rng.random_range(0.9f32..=1.1);
    let (sh, sw) = (libm::roundf(h as f32 * scale).max(1.0) as usize, libm::roundf(w as f32 * scale).max(1.0) as usize);
    out = out.resize(sh, sw).resize(h, w);
    let quality = rng.random_range(60u8..=95);
    out = codec.roundtrip(&out, quality);
    (out, alloc::vec![Operation::ColorJitter { brightness, contrast }, Operation::ResizeJitter { scale }, Operation::Jpeg { quality }])
}

pub const MIN_PAIR_SIDE: usize = 64;

fn check_pair_side(image: &ImageTensor) -> Result<()> {
    image.validate(MIN_PAIR_SIDE)
}

/// `(edited + augmented copy, original)` labeled shared-probe.
pub fn synthesize_spg_pair<R: Rng>(image: &ImageTensor, splice_source: Option<&ImageTensor>, codec: &dyn JpegCodec, rng: &mut R) -> Result<PairSample> {
    check_pair_side(image)?;
    let (edited, mask, op) = manipulate(image, splice_source, rng);
    let (probe, mut ops) = augment(&edited, codec, rng);
    ops.insert(0, op);
    Ok(PairSample { probe, reference: image.clone(), group: PairGroup::Spg, gt_mask: Some(mask), reference_mask: None, provenance: ops })
}

/// `(target with 1–3 resized donor regions pasted, donor)` labeled shared-donor.
pub fn synthesize_sdg_pair<R: Rng>(donor: &ImageTensor, target: &ImageTensor, rng: &mut R) -> Result<PairSample> {
    check_pair_side(donor)?;
    check_pair_side(target)?;
    let (dh, dw) = donor.size();
    let (th, tw) = target.size();
    let count = rng.random_range(1..=3);
    let mut probe = target.clone();
    let mut placed: Vec<Rect> = Vec::new();
    let mut ops = Vec::new();
    let mut reference_mask = BinaryMask::zeros(dw, dh);
    for _ in 0..count {
        let from = random_rect(rng, dh, dw, 0.15, 0.35);
        let scale = rng.random_range(0.75f32..=1.25);
        let h = ((from.h as f32 * scale) as usize).clamp(4, th);
        let w = ((from.w as f32 * scale) as usize).clamp(4, tw);
        let slot = (0..50).find_map(|_| {
            let to = Rect { y: rng.random_range(0..=th - h), x: rng.random_range(0..=tw - w), h, w };
            (!placed.iter().any(|p| p.overlaps(&to))).then_some(to)
        });
        let Some(to) = slot else { continue };
        let patch = donor.crop(from.y, from.x, from.h, from.w).resize(h, w);
        paste(&mut probe, &patch, to.y, to.x);
        reference_mask = reference_mask.union(&from.mask(dw, dh));
        placed.push(to);
        ops.push(Operation::DonorPaste { from, to });
    }
    let mut gt = BinaryMask::zeros(tw, th);
    for r in &placed {
        gt = gt.union(&r.mask(tw, th));
    }
    Ok(PairSample { probe, reference: donor.clone(), group: PairGroup::Sdg, gt_mask: Some(gt), reference_mask: Some(reference_mask), provenance: ops })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub input_side: usize,
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { input_side: 128, width: 16 }
    }
}

/// `[a, b, mean_c |a − b|]` at `side × side`.
pub fn classifier_input(a: &ImageTensor, b: &ImageTensor, side: usize) -> Tensor<f32> {
    let a = a.resize(side, side);
    let b = b.resize(side, side);
    let n = side * side;
    let mut data = Vec::with_capacity(7 * n);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    let (da, db) = (a.data(), b.data());
    data.extend((0..n).map(|i| ((da[i] - db[i]).abs() + (da[n + i] - db[n + i]).abs() + (da[2 * n + i] - db[2 * n + i]).abs()) / 3.0));
    Tensor::from_vec(&[7, side, side], data)
}

const DOWN: ConvGeom = ConvGeom { stride: 2, padding: 1, dilation: 1 };

/// Four stride-2 conv blocks, global average pooling and a linear head;
/// outputs the probability that a pair is shared-probe.
pub struct PairClassifier<T: Real> {
    pub config: ClassifierConfig,
    pub params: ParamSet<T>,
    pub trained: bool,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl<T: Real> PairClassifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let c = config.width;
        let dims = [7, c, 2 * c, 4 * c, 4 * c];
        let blocks = (0..4).map(|i| b.conv(&format!("block{i}"), dims[i], dims[i + 1], 3, DOWN, true)).collect();
        let head = b.conv("head", 4 * c, 1, 1, ConvGeom::SAME, true);
        Self { config, params, trained: false, blocks, head }
    }

    pub fn logit(&self, tape: &mut Tape<'_, T>, input: &Tensor<T>) -> Var {
        let mut h = tape.input(input.clone());
        for conv in &self.blocks {
            h = conv.forward_relu(tape, h);
        }
        let pooled = tape.global_avg_pool(h);
        self.head.forward(tape, pooled)
    }

    fn prob(&self, input: Tensor<f32>) -> f32 {
        let mut tape = Tape::new(&self.params);
        let z = self.logit(&mut tape, &Tensor::cast(&input));
        sigmoid(tape.value(z).data()[0]).as_f32()
    }
}

/// Probability that `(a, b)` is a shared-probe pair, averaged over both orderings.
pub fn classify_pair<T: Real>(a: &ImageTensor, b: &ImageTensor, clf: &PairClassifier<T>) -> Result<f32> {
    if !clf.trained {
        return Err(Error::Untrained);
    }
    let side = clf.config.input_side;
    let p = 0.5 * (clf.prob(classifier_input(a, b, side)) + clf.prob(classifier_input(b, a, side)));
    Ok(p.clamp(0.0, 1.0))
}

/// Routing rule: `p >= 0.5` goes to the shared-probe branch.
pub fn route(p: f32) -> PairGroup {
    if p >= 0.5 {
        PairGroup::Spg
    } else {
        PairGroup::Sdg
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierSample {
    pub input: Tensor<f32>,
    pub is_spg: bool,
}

impl ClassifierSample {
    /// Both orderings of a pair.
    pub fn from_pair(pair: &PairSample, side: usize) -> [Self; 2] {
        let is_spg = pair.group == PairGroup::Spg;
        [
            Self { input: classifier_input(&pair.probe, &pair.reference, side), is_spg },
            Self { input: classifier_input(&pair.reference, &pair.probe, side), is_spg },
        ]
    }
}

impl Objective for PairClassifier<f32> {
    type Sample = ClassifierSample;

    fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape<'_, f32>, sample: &ClassifierSample) -> Option<Var> {
        let z = self.logit(tape, &sample.input);
        Some(tape.bce_with_logits(z, &[if sample.is_spg { 1.0 } else { 0.0 }]))
    }
}

/// Human-readable provenance line.
pub fn describe(ops: &[Operation]) -> String {
    let parts: Vec<String> = ops
        .iter()
        .map(|op| match op {
            Operation::CopyPaste { from, to } => format!("copy-paste {}x{}@{},{} -> {},{}", from.h, from.w, from.y, from.x, to.y, to.x),
            Operation::Splice { to } => format!("splice {}x{}@{},{}", to.h, to.w, to.y, to.x),
            Operation::Removal { region } => format!("removal {}x{}@{},{}", region.h, region.w, region.y, region.x),
            Operation::DonorPaste { from, to } => {
                format!("donor-paste {}x{}@{},{} -> {}x{}@{},{}", from.h, from.w, from.y, from.x, to.h, to.w, to.y, to.x)
            }
            Operation::ColorJitter { brightness, contrast } => format!("color b={brightness:.3} c={contrast:.3}"),
            Operation::ResizeJitter { scale } => format!("resize s={scale:.3}"),
            Operation::Jpeg { quality } => format!("jpeg q={quality}"),
        })
        .collect();
    parts.join("; ")
}
