//! Object jitter: subtle size, exposure and texture edits on segmented
//! objects, blended into the image with a soft edge.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, label_components, BinaryMask, ImageTensor};
use crate::jpeg::{ArtifactRemoval, JpegCodec};

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub mask: BinaryMask,
    pub source: String,
}

impl ObjectMask {
    pub fn area(&self) -> usize {
        self.mask.area()
    }

    /// Nonempty and smaller than half the image.
    pub fn is_valid(&self) -> bool {
        let a = self.area();
        a > 0 && 2 * a < self.mask.width() * self.mask.height()
    }
}

/// Source of candidate object masks for an image.
pub trait MaskProvider {
    fn id(&self) -> &str;
    fn candidates(&self, image: &ImageTensor) -> Result<Vec<BinaryMask>>;
}

/// Connected components of every nonzero value of a label image.
#[derive(Clone, Debug, PartialEq)]
pub struct CcLabels {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl CcLabels {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Self {
        assert_eq!(labels.len(), width * height);
        Self { width, height, labels }
    }
}

impl MaskProvider for CcLabels {
    fn id(&self) -> &str {
        "cc-labels"
    }

    fn candidates(&self, image: &ImageTensor) -> Result<Vec<BinaryMask>> {
        if image.size() != (self.height, self.width) {
            return Err(Error::SizeMismatch { expected: (self.height, self.width), actual: image.size() });
        }
        let mut values: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        values.sort_unstable();
        values.dedup();
        let mut out = Vec::new();
        for v in values {
            let comps = label_components(self.width, self.height, |i| self.labels[i] == v);
            let n = comps.iter().copied().max().unwrap_or(0);
            for k in 1..=n {
                out.push(BinaryMask::from_vec(self.width, self.height, comps.iter().map(|&c| (c == k) as u8).collect()));
            }
        }
        Ok(out)
    }
}

/// Picks 1–3 valid, mutually disjoint objects.
pub fn select_objects<R: Rng>(image: &ImageTensor, provider: &dyn MaskProvider, rng: &mut R) -> Result<Vec<ObjectMask>> {
    let mut valid: Vec<ObjectMask> = provider
        .candidates(image)?
        .into_iter()
        .map(|mask| ObjectMask { mask, source: provider.id().into() })
        .filter(ObjectMask::is_valid)
        .collect();
    if valid.is_empty() {
        return Err(Error::NoValidObject);
    }
    let want = rng.random_range(1..=3usize).min(valid.len());
    valid.shuffle(rng);
    let mut chosen: Vec<ObjectMask> = Vec::new();
    for cand in valid {
        if chosen.len() == want {
            break;
        }
        if chosen.iter().all(|c| !c.mask.overlaps(&cand.mask)) {
            chosen.push(cand);
        }
    }
    Ok(chosen)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterConfig {
    pub max_scale: f32,
    pub max_gain: f32,
    pub jpeg_quality: (u8, u8),
    pub blur_sigma: (f32, f32),
    pub band: (usize, usize),
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { max_scale: 1.15, max_gain: 1.25, jpeg_quality: (50, 90), blur_sigma: (0.5, 1.5), band: (1, 5) }
    }
}

fn out_of_range(what: &str, v: f64, lo: f64, hi: f64) -> Error {
    Error::Config(alloc::format!("{what} {v} outside [{lo}, {hi}]"))
}

fn centroid(mask: &BinaryMask) -> (f32, f32) {
    let (mut sy, mut sx, mut n) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                sy += y as f64 + 0.5;
                sx += x as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    ((sy / n) as f32, (sx / n) as f32)
}

fn bilinear(image: &ImageTensor, c: usize, y: f32, x: f32) -> f32 {
    let (h, w) = image.size();
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let (y0, x0) = (y as usize, x as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = image.get(c, y0, x0) * (1.0 - fx) + image.get(c, y0, x1) * fx;
    let bottom = image.get(c, y1, x0) * (1.0 - fx) + image.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Enlarges the object about its centroid; the returned mask is the scaled
/// mask clipped to the image.
pub fn size_jitter(image: &ImageTensor, mask: &BinaryMask, scale: f32) -> Result<(ImageTensor, BinaryMask)> {
    if !(1.0..=1.15).contains(&scale) {
        return Err(out_of_range("scale", scale as f64, 1.0, 1.15));
    }
    if scale == 1.0 || mask.area() == 0 {
        return Ok((image.clone(), mask.clone()));
    }
    let (h, w) = image.size();
    let (cy, cx) = centroid(mask);
    let (y0, x0, y1, x1) = mask.bbox().expect("nonempty mask");
    let grow = |lo: usize, c: f32| libm::floorf(c - (c - lo as f32) * scale).max(0.0) as usize;
    let grow_hi = |hi: usize, c: f32, n: usize| (libm::ceilf(c + (hi as f32 - c) * scale) as usize + 1).min(n);
    let mut out = image.clone();
    let mut new_mask = BinaryMask::zeros(w, h);
    for y in grow(y0, cy)..grow_hi(y1, cy, h) {
        for x in grow(x0, cx)..grow_hi(x1, cx, w) {
            let sy = cy + (y as f32 + 0.5 - cy) / scale;
            let sx = cx + (x as f32 + 0.5 - cx) / scale;
            if sy < 0.0 || sx < 0.0 || sy >= h as f32 || sx >= w as f32 || !mask.get(sy as usize, sx as usize) {
                continue;
            }
            new_mask.set(y, x, true);
            for c in 0..3 {
                out.set(c, y, x, bilinear(image, c, sy - 0.5, sx - 0.5));
            }
        }
    }
    Ok((out, new_mask))
}

/// Scales masked pixels by `gain`, clipping at 1.
pub fn exposure_jitter(image: &ImageTensor, mask: &BinaryMask, gain: f32) -> Result<ImageTensor> {
    if !(1.0..=1.25).contains(&gain) {
        return Err(out_of_range("gain", gain as f64, 1.0, 1.25));
    }
    let mut out = image.clone();
    let n = mask.data().len();
    for (i, &m) in mask.data().iter().enumerate() {
        if m != 0 {
            for c in 0..3 {
                let v = &mut out.data_mut()[c * n + i];
                *v = (*v * gain).min(1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TextureOp {
    Jpeg(u8),
    ReverseJpeg,
    Blur(f32),
}

const TEXTURE_MARGIN: usize = 8;

/// Applies `ops` in order to the object's neighbourhood and pastes the
/// result back under the mask.
pub fn texture_jitter(image: &ImageTensor, mask: &BinaryMask, ops: &[TextureOp], codec: &dyn JpegCodec, restorer: &dyn ArtifactRemoval) -> Result<ImageTensor> {
    if ops.is_empty() {
        return Err(Error::Config("texture jitter needs at least one op".into()));
    }
    for op in ops {
        match *op {
            TextureOp::Jpeg(q) if !(50..=90).contains(&q) => return Err(out_of_range("jpeg quality", q as f64, 50.0, 90.0)),
            TextureOp::Blur(s) if !(0.5..=1.5).contains(&s) => return Err(out_of_range("blur sigma", s as f64, 0.5, 1.5)),
            _ => {}
        }
    }
    let Some((y0, x0, y1, x1)) = mask.bbox() else { return Ok(image.clone()) };
    let (h, w) = image.size();
    let (y0, x0) = (y0.saturating_sub(TEXTURE_MARGIN), x0.saturating_sub(TEXTURE_MARGIN));
    let (y1, x1) = ((y1 + TEXTURE_MARGIN).min(h), (x1 + TEXTURE_MARGIN).min(w));
    let mut patch = image.crop(y0, x0, y1 - y0, x1 - x0);
    for op in ops {
        patch = match *op {
            TextureOp::Jpeg(q) => codec.roundtrip(&patch, q),
            TextureOp::ReverseJpeg => restorer.restore(&patch),
            TextureOp::Blur(sigma) => {
                let (ph, pw) = patch.size();
                let radius = libm::ceilf(3.0 * sigma) as usize;
                ImageTensor::from_raw(pw, ph, gaussian_blur(patch.data(), 3, ph, pw, sigma, radius))
            }
        };
    }
    let mut out = image.clone();
    for y in y0..y1 {
        for x in x0..x1 {
            if mask.get(y, x) {
                for c in 0..3 {
                    out.set(c, y, x, patch.get(c, y - y0, x - x0));
                }
            }
        }
    }
    Ok(out)
}

/// Box-filtered mask: fraction of set pixels in the `(2·band+1)²` window.
pub fn soft_alpha(mask: &BinaryMask, band: usize) -> Vec<f32> {
    let (h, w) = mask.size();
    let mut integral = alloc::vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            integral[(y + 1) * (w + 1) + x + 1] =
                mask.get(y, x) as u32 + integral[y * (w + 1) + x + 1] + integral[(y + 1) * (w + 1) + x] - integral[y * (w + 1) + x];
        }
    }
    let total = ((2 * band + 1) * (2 * band + 1)) as u32;
    let mut alpha = alloc::vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (ya, yb) = (y.saturating_sub(band), (y + band + 1).min(h));
            let (xa, xb) = (x.saturating_sub(band), (x + band + 1).min(w));
            let s = integral[yb * (w + 1) + xb] + integral[ya * (w + 1) + xa] - integral[ya * (w + 1) + xb] - integral[yb * (w + 1) + xa];
            alpha[y * w + x] = if s == total { 1.0 } else { s as f32 / total as f32 };
        }
    }
    alpha
}

/// Composites `modified` over `original` with a softened mask; the
/// transition shape `alpha^γ` uses a random `γ`.
pub fn blend_edges<R: Rng>(original: &ImageTensor, modified: &ImageTensor, mask: &BinaryMask, band: usize, rng: &mut R) -> Result<ImageTensor> {
    if !(1..=5).contains(&band) {
        return Err(out_of_range("band", band as f64, 1.0, 5.0));
    }
    if original.size() != modified.size() || original.size() != mask.size() {
        return Err(Error::SizeMismatch { expected: original.size(), actual: modified.size() });
    }
    let gamma: f32 = rng.random_range(0.7..=1.4);
    let alpha = soft_alpha(mask, band);
    let n = alpha.len();
    let (o, m) = (original.data(), modified.data());
    let mut out = original.clone();
    for (i, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let a = libm::powf(a, gamma);
        for c in 0..3 {
            let j = c * n + i;
            out.data_mut()[j] = if a == 1.0 || o[j] == m[j] { m[j] } else { a * m[j] + (1.0 - a) * o[j] };
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub enum JitterOp {
    Size { scale: f32 },
    Exposure { gain: f32 },
    Texture { ops: Vec<TextureOp> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectJitter {
    pub ops: Vec<JitterOp>,
    pub band: usize,
    pub pre_mask: BinaryMask,
    pub post_mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JitterRecord {
    pub forged: ImageTensor,
    /// Union of the post-jitter object masks.
    pub gt_mask: BinaryMask,
    pub objects: Vec<ObjectJitter>,
}

impl JitterRecord {
    /// Every pixel that may differ from the input.
    pub fn support(&self) -> BinaryMask {
        let (h, w) = self.forged.size();
        let band = self.objects.iter().map(|o| o.band).max().unwrap_or(0);
        let mut all = BinaryMask::zeros(w, h);
        for o in &self.objects {
            all = all.union(&o.pre_mask).union(&o.post_mask);
        }
        all.dilate(band)
    }
}

/// Jitters 1–3 objects. Each gets a random nonempty subset of
/// size/exposure/texture edits followed by edge blending.
pub fn apply_object_jitter<R: Rng>(
    image: &ImageTensor,
    provider: &dyn MaskProvider,
    codec: &dyn JpegCodec,
    restorer: &dyn ArtifactRemoval,
    cfg: &JitterConfig,
    rng: &mut R,
) -> Result<JitterRecord> {
    let objects = select_objects(image, provider, rng)?;
    let (h, w) = image.size();
    let mut current = image.clone();
    let mut gt = BinaryMask::zeros(w, h);
    let mut records = Vec::new();
    for obj in objects {
        let subset = rng.random_range(1u8..8);
        let mut modified = current.clone();
        let mut post = obj.mask.clone();
        let mut ops = Vec::new();
        if subset & 1 != 0 {
            let scale = rng.random_range(1.02..=cfg.max_scale);
            (modified, post) = size_jitter(&modified, &obj.mask, scale)?;
            ops.push(JitterOp::Size { scale });
        }
        if subset & 2 != 0 {
            let gain = rng.random_range(1.05..=cfg.max_gain);
            modified = exposure_jitter(&modified, &post, gain)?;
            ops.push(JitterOp::Exposure { gain });
        }
        if subset & 4 != 0 {
            let pick = rng.random_range(1u8..8);
            let mut tex = Vec::new();
            if pick & 1 != 0 {
                tex.push(TextureOp::Jpeg(rng.random_range(cfg.jpeg_quality.0..=cfg.jpeg_quality.1)));
            }
            if pick & 2 != 0 {
                tex.push(TextureOp::ReverseJpeg);
            }
            if pick & 4 != 0 {
                tex.push(TextureOp::Blur(rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1)));
            }
            modified = texture_jitter(&modified, &post, &tex, codec, restorer)?;
            ops.push(JitterOp::Texture { ops: tex });
        }
        let band = rng.random_range(cfg.band.0..=cfg.band.1);
        current = blend_edges(&current, &modified, &post, band, rng)?;
        gt = gt.union(&post);
        records.push(ObjectJitter { ops, band, pre_mask: obj.mask, post_mask: post });
    }
    Ok(JitterRecord { forged: current, gt_mask: gt, objects: records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exposure_arithmetic() {
        let mut img = ImageTensor::filled(32, 32, [0.5, 0.9, 0.1]);
        img.set(0, 0, 1, 0.2);
        let mask = BinaryMask::rect(32, 32, 0, 0, 1, 1);
        let out = exposure_jitter(&img, &mask, 1.2).unwrap();
        assert!((out.get(0, 0, 0) - 0.6).abs() < 1e-6);
        assert_eq!(out.get(1, 0, 0), 1.0);
        assert_eq!(out.get(0, 0, 1), 0.2);
        assert_eq!(exposure_jitter(&img, &mask, 1.0).unwrap(), img);
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        let img = ImageTensor::filled(32, 32, [0.5; 3]);
        let mask = BinaryMask::rect(32, 32, 4, 4, 8, 8);
        assert!(size_jitter(&img, &mask, 1.3).is_err());
        assert!(exposure_jitter(&img, &mask, 0.9).is_err());
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        assert!(blend_edges(&img, &img, &mask, 6, &mut rng).is_err());
    }

    #[test]
    fn oversized_candidates_give_skip_signal() {
        let img = ImageTensor::filled(32, 32, [0.5; 3]);
        let provider = CcLabels::new(32, 32, alloc::vec![1; 32 * 32]);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        assert_eq!(select_objects(&img, &provider, &mut rng), Err(Error::NoValidObject));
    }
}
