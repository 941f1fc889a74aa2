//! Dataset construction (dedup, auto-annotation, quality filtering),
//! training loops with checkpointing, and evaluation.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use miml_core::annotate::{annotate_pair, corr_dino_probe_mask, grid_input_size, Annotation, AnnotationStatus, Annotator};
use miml_core::corrdino::{CorrDino, CorrDinoSample};
use miml_core::dass::{dass_forward, DassSample};
use miml_core::image::{BinaryMask, ImageTensor, ProbabilityMask};
use miml_core::jpeg::JpegCodec;
use miml_core::metrics::{score_sample, EvalReport, Perturbation};
use miml_core::pairs::{classify_pair, route, synthesize_sdg_pair, synthesize_spg_pair, ClassifierSample, PairGroup, PairSample};
use miml_core::phash::phash;
use miml_core::qes::{is_retained, qes_score, QesConfig};
use miml_core::train::{Objective, Trainer};
use miml_core::webiml::{web_iml_forward, WebIml, WebImlSample};
use rand::Rng;

use crate::checkpoint::{self, save_rotating, CADENCE};
use crate::dataset::LoadedPair;
use crate::dedup::{image_md5, to_hex, DedupIndex, DedupOutcome};
use crate::error::{Error, Result};
use crate::io::{load_probability, save_probability};
use crate::manifest::{load_manifest, round4, AnnotationRecord, Header, ManifestWriter, Status};
use crate::models::{save_model, AnyModel, Persist};

/// Synthesizes `count` pairs from a pool of source images, `sdg_fraction`
/// of them shared-donor.
pub fn synthesize_pairs<R: Rng>(pool: &[ImageTensor], count: usize, sdg_fraction: f64, codec: &dyn JpegCodec, rng: &mut R) -> Result<Vec<PairSample>> {
    if pool.len() < 2 {
        return Err(Error::Data("pair synthesis needs at least two source images".into()));
    }
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..pool.len());
            let mut j = rng.random_range(0..pool.len() - 1);
            if j >= i {
                j += 1;
            }
            let pair = if rng.random_bool(sdg_fraction) {
                synthesize_sdg_pair(&pool[i], &pool[j], rng)?
            } else {
                let splice = rng.random_bool(0.5).then_some(&pool[j]);
                synthesize_spg_pair(&pool[i], splice, codec, rng)?
            };
            Ok(pair)
        })
        .collect()
}

/// One unannotated pair.
#[derive(Clone, Debug)]
pub struct PairInput {
    pub id: String,
    pub probe_path: String,
    pub reference_path: String,
    pub probe: ImageTensor,
    pub reference: ImageTensor,
    pub source: String,
}

impl PairInput {
    pub fn from_loaded(dir: &Path, pair: &LoadedPair) -> Self {
        Self {
            id: pair.entry.id.clone(),
            probe_path: dir.join(&pair.entry.probe).display().to_string(),
            reference_path: dir.join(&pair.entry.reference).display().to_string(),
            probe: pair.probe.clone(),
            reference: pair.reference.clone(),
            source: pair.entry.provenance.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnnotateOptions {
    pub qes: QesConfig,
    /// Store masks only for retained records instead of every successful one.
    pub retained_masks_only: bool,
    pub jobs: usize,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self { qes: QesConfig::default(), retained_masks_only: false, jobs: 1 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AnnotateSummary {
    pub records: Vec<AnnotationRecord>,
    /// Ids skipped as duplicates of an earlier probe.
    pub duplicates: Vec<(String, DedupOutcome)>,
}

impl AnnotateSummary {
    pub fn retained(&self) -> usize {
        self.records.iter().filter(|r| r.retained).count()
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| r.status == Status::Failed).count()
    }
}

/// Scores the mask as it will be stored: quantized to 8 bits, QES rounded to
/// four decimals.
pub fn stored_quality(mask: &ProbabilityMask, cfg: &QesConfig) -> Result<(ProbabilityMask, f64, bool)> {
    let (h, w) = mask.size();
    let stored = ProbabilityMask::from_u8(w, h, &mask.to_u8());
    let qes = round4(qes_score(&stored, cfg)?);
    Ok((stored, qes, is_retained(qes, cfg)))
}

fn run_parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                *slots[i].lock().expect("slot lock") = Some(f(i));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot filled")).collect()
}

/// Deduplicates probes in input order, annotates the survivors in parallel
/// and writes `manifest.jsonl` plus `masks/<id>.png` under `out_dir` with a
/// single writer, in input order.
pub fn annotate_pairs(inputs: &[PairInput], annotator: &(dyn Annotator + Sync), out_dir: &Path, opts: &AnnotateOptions) -> Result<AnnotateSummary> {
    opts.qes.validate()?;
    let index = DedupIndex::default();
    let mut summary = AnnotateSummary::default();
    let mut unique = Vec::new();
    for input in inputs {
        let md5 = image_md5(&input.probe);
        let hash = phash(&input.probe);
        match index.check_insert_hashes(md5, hash) {
            DedupOutcome::Inserted => unique.push((input, to_hex(&md5), format!("{hash:016x}"))),
            dup => summary.duplicates.push((input.id.clone(), dup)),
        }
    }
    let annotations: Vec<Annotation> = run_parallel(unique.len(), opts.jobs, |i| {
        let input = unique[i].0;
        annotate_pair(&input.probe, &input.reference, annotator, &opts.qes)
    });
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut writer = ManifestWriter::create(&manifest_path, Header::new(&opts.qes))?;
    for ((input, md5, phash), ann) in unique.into_iter().zip(annotations) {
        let mut record = AnnotationRecord {
            id: input.id.clone(),
            probe_path: input.probe_path.clone(),
            reference_path: input.reference_path.clone(),
            group: ann.group.map(Into::into),
            mask_path: None,
            qes: 0.0,
            retained: false,
            status: Status::Ok,
            error: None,
            md5,
            phash,
            source: input.source.clone(),
        };
        let scored = match (&ann.status, &ann.mask) {
            (AnnotationStatus::Ok, Some(mask)) => stored_quality(mask, &opts.qes).map_err(|e| e.to_string()),
            (AnnotationStatus::Failed(msg), _) => Err(msg.clone()),
            (AnnotationStatus::Ok, None) => Err("annotation produced no mask".into()),
        };
        match scored {
            Ok((mask, qes, retained)) => {
                record.qes = qes;
                record.retained = retained;
                if retained || !opts.retained_masks_only {
                    let rel = format!("masks/{}.png", input.id);
                    save_probability(&out_dir.join(&rel), &mask)?;
                    record.mask_path = Some(rel);
                }
            }
            Err(msg) => {
                record.status = Status::Failed;
                record.error = Some(msg);
            }
        }
        writer.push(&record)?;
        summary.records.push(record);
    }
    writer.flush()?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSummary {
    pub total: usize,
    pub rescored: usize,
    pub retained: usize,
    pub written: usize,
}

/// Re-scores every stored mask under `cfg` and writes a new manifest.
/// With `retained_only`, dropped records are omitted from the output.
pub fn qes_filter(input: &Path, output: &Path, cfg: &QesConfig, retained_only: bool) -> Result<FilterSummary> {
    cfg.validate()?;
    let (_, records) = load_manifest(input)?;
    let in_dir = input.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir = output.parent().unwrap_or(Path::new(".")).to_path_buf();
    let same_dir = std::fs::canonicalize(if in_dir.as_os_str().is_empty() { Path::new(".") } else { &in_dir }).ok()
        == std::fs::canonicalize(if out_dir.as_os_str().is_empty() { Path::new(".") } else { &out_dir }).ok();
    let mut summary = FilterSummary { total: records.len(), rescored: 0, retained: 0, written: 0 };
    let mut kept = Vec::new();
    for mut r in records {
        if let Some(rel) = &r.mask_path {
            let path = in_dir.join(rel);
            let mask = load_probability(&path)?;
            r.qes = round4(qes_score(&mask, cfg)?);
            summary.rescored += 1;
            if !same_dir {
                let abs = std::fs::canonicalize(&path).map_err(|e| Error::io(&path, e))?;
                r.mask_path = Some(abs.display().to_string());
            }
        }
        r.retained = r.status == Status::Ok && is_retained(r.qes, cfg);
        summary.retained += r.retained as usize;
        if r.retained || !retained_only {
            kept.push(r);
        }
    }
    summary.written = kept.len();
    let tmp: PathBuf = output.with_extension("jsonl.tmp");
    crate::manifest::write_manifest(&tmp, Header::new(cfg), &kept)?;
    std::fs::rename(&tmp, output).map_err(|e| Error::io(output, e))?;
    Ok(summary)
}

/// Result of evaluating a checkpoint on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Evaluation {
    Localization(EvalReport),
    Routing { correct: usize, total: usize },
}

impl Evaluation {
    pub fn to_text(&self) -> String {
        match self {
            Evaluation::Localization(r) => r.to_text(),
            Evaluation::Routing { correct, total } => {
                format!("summary n={total} correct={correct} accuracy={:.6}\n", *correct as f64 / (*total).max(1) as f64)
            }
        }
    }
}

fn perturb_pair(p: Option<&Perturbation>, a: &ImageTensor, b: &ImageTensor, gt: &BinaryMask, codec: &dyn JpegCodec) -> Result<(ImageTensor, ImageTensor, BinaryMask)> {
    Ok(match p {
        Some(p) => (p.apply(a, codec)?, p.apply(b, codec)?, p.apply_to_mask(gt)),
        None => (a.clone(), b.clone(), gt.clone()),
    })
}

/// Pair models are scored on the probe mask of pairs from their own group.
pub fn evaluate_pairs(model: &AnyModel, pairs: &[LoadedPair], perturbation: Option<&Perturbation>, codec: &dyn JpegCodec, threshold: f32) -> Result<Evaluation> {
    let group = match model {
        AnyModel::Classifier(clf) => {
            let mut correct = 0;
            for p in pairs {
                let (a, b) = match perturbation {
                    Some(pt) => (pt.apply(&p.probe, codec)?, pt.apply(&p.reference, codec)?),
                    None => (p.probe.clone(), p.reference.clone()),
                };
                correct += (route(classify_pair(&a, &b, clf)?) == p.group()) as usize;
            }
            return Ok(Evaluation::Routing { correct, total: pairs.len() });
        }
        AnyModel::Dass(_) => PairGroup::Spg,
        AnyModel::CorrDino(_) => PairGroup::Sdg,
        AnyModel::WebIml(_) => return Err(Error::Usage("webiml evaluates on a samples dataset".into())),
    };
    let mut scores = Vec::new();
    for (i, p) in pairs.iter().filter(|p| p.group() == group).enumerate() {
        let gt = p.gt_mask.as_ref().ok_or(miml_core::Error::MissingGroundTruth(i))?;
        let (a, b, gt) = perturb_pair(perturbation, &p.probe, &p.reference, gt, codec)?;
        let pred = match model {
            AnyModel::Dass(m) => dass_forward(&a, &b, m)?,
            AnyModel::CorrDino(m) => corr_dino_probe_mask(&a, &b, m)?,
            _ => unreachable!("handled above"),
        };
        scores.push(score_sample(&pred, &gt, threshold)?);
    }
    if scores.is_empty() {
        return Err(Error::Data(format!("no {} pairs to evaluate", group.as_str())));
    }
    Ok(Evaluation::Localization(EvalReport::from_samples(scores, threshold, perturbation)))
}

pub fn evaluate_images(model: &WebIml<f32>, samples: &[(ImageTensor, Option<BinaryMask>)], perturbation: Option<&Perturbation>, codec: &dyn JpegCodec, threshold: f32) -> Result<Evaluation> {
    let report = miml_core::metrics::evaluate(|img| web_iml_forward(img, model), samples, perturbation, codec, threshold)?;
    Ok(Evaluation::Localization(report))
}

fn resize_mask(m: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    if m.size() == (h, w) {
        m.clone()
    } else {
        m.resize_nearest(h, w)
    }
}

pub fn classifier_samples(pairs: &[LoadedPair], side: usize) -> Vec<ClassifierSample> {
    pairs
        .iter()
        .flat_map(|p| {
            let pair = PairSample {
                probe: p.probe.clone(),
                reference: p.reference.clone(),
                group: p.group(),
                gt_mask: None,
                reference_mask: None,
                provenance: Vec::new(),
            };
            ClassifierSample::from_pair(&pair, side)
        })
        .collect()
}

/// Shared-probe pairs with ground truth, resized to `side`².
pub fn dass_samples(pairs: &[LoadedPair], side: usize) -> Result<Vec<DassSample>> {
    pairs
        .iter()
        .filter(|p| p.group() == PairGroup::Spg)
        .filter_map(|p| p.gt_mask.as_ref().map(|m| (p, m)))
        .map(|(p, m)| Ok(DassSample::new(&p.probe.resize(side, side), &p.reference.resize(side, side), resize_mask(m, side, side))?))
        .collect()
}

/// Shared-donor pairs resampled to the model's token grid.
pub fn corrdino_samples(model: &CorrDino<f32>, pairs: &[LoadedPair]) -> Result<Vec<CorrDinoSample>> {
    let (h, w) = grid_input_size(model);
    pairs
        .iter()
        .filter(|p| p.group() == PairGroup::Sdg && (p.gt_mask.is_some() || p.reference_mask.is_some()))
        .map(|p| {
            let features = model.prepare(&p.probe.resize(h, w), &p.reference.resize(h, w))?;
            Ok(CorrDinoSample {
                features,
                mask_a: p.gt_mask.as_ref().map(|m| resize_mask(m, h, w)),
                mask_b: p.reference_mask.as_ref().map(|m| resize_mask(m, h, w)),
            })
        })
        .collect()
}

/// Labelled images resized to `side`².
pub fn webiml_samples(model: &WebIml<f32>, samples: &[(ImageTensor, Option<BinaryMask>)], side: usize) -> Result<Vec<WebImlSample>> {
    samples
        .iter()
        .filter_map(|(img, m)| m.as_ref().map(|m| (img, m)))
        .map(|(img, m)| Ok(WebImlSample { input: model.prepare(&img.resize(side, side))?, mask: resize_mask(m, side, side) }))
        .collect()
}

/// Runs the trainer to completion, writing a rotating checkpoint every
/// [`CADENCE`] steps and `<prefix>.ckpt` at the end.
pub fn train_with_checkpoints<M, F>(trainer: &mut Trainer<M>, datasets: &[&[M::Sample]], out_dir: &Path, prefix: &str, mut log: F) -> Result<PathBuf>
where
    M: Objective + Persist,
    F: FnMut(u64, f64),
{
    if datasets.iter().all(|d| d.is_empty()) {
        return Err(miml_core::Error::EmptyDataset("no training samples".into()).into());
    }
    while trainer.step < trainer.config.iterations {
        let loss = trainer.step(datasets)?;
        log(trainer.step, loss);
        if trainer.step % CADENCE == 0 {
            save_rotating(out_dir, prefix, trainer.model.spec().to_json(), trainer.step, trainer.model.parameters(), &trainer.optimizer)?;
        }
    }
    let path = out_dir.join(format!("{prefix}.ckpt"));
    save_model(&path, &trainer.model, trainer.step, Some(&trainer.optimizer))?;
    Ok(path)
}

/// Newest rotating checkpoint of `prefix`, if any.
pub fn latest_checkpoint(out_dir: &Path, prefix: &str) -> Result<Option<PathBuf>> {
    if !out_dir.is_dir() {
        return Ok(None);
    }
    Ok(checkpoint::rotating(out_dir, prefix)?.pop())
}
