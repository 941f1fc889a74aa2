//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 3 8`.

#[path = "../../core/tests/support/mod.rs"]
#[allow(dead_code)]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use miml::codec::ImageJpeg;
use miml::dataset::{self, JsonlWriter, PAIRS_INDEX};
use miml::dedup::{DedupIndex, DedupOutcome};
use miml::manifest::{load_manifest, validate_manifest, write_manifest};
use miml::models::save_backbone;
use miml::pipeline::{self, AnnotateOptions, PairInput};
use miml_core::annotate::Models;
use miml_core::backbone::{BackendHandle, FeatureBackend, StubBackend, StubPyramidBackend, TransformerBackbone, TransformerConfig};
use miml_core::corrdino::{correlation, CorrDino, CorrDinoConfig, CorrDinoSample, DenoiserConfig};
use miml_core::dass::{otsu_threshold, DassConfig, DassModel, DassSample, DifferenceMap};
use miml_core::image::{BinaryMask, ImageTensor, ProbabilityMask};
use miml_core::jitter::{apply_object_jitter, blend_edges, exposure_jitter, size_jitter, CcLabels, JitterConfig};
use miml_core::jpeg::{BaselineJpeg, DeblockFilter};
use miml_core::metrics::{binarize, f1, iou, pixel_auc};
use miml_core::pairs::{classify_pair, paste, route, synthesize_sdg_pair, synthesize_spg_pair, ClassifierConfig, ClassifierSample, PairClassifier, PairSample};
use miml_core::qes::{filter_annotations, is_retained, qes_score, QesConfig, Scored};
use miml_core::synth::{generate, SceneConfig};
use miml_core::train::{Objective, TrainConfig, Trainer};
use miml_core::webiml::{WebIml, WebImlConfig, WebImlEncoder, WebImlSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn scene(side: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    generate(&SceneConfig::square(side), rng).image
}

fn noise_image(side: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
    ImageTensor::from_raw(side, side, (0..3 * side * side).map(|_| rng.random::<f32>()).collect())
}

fn mean_iou<S>(samples: &[S], predict: impl Fn(&S) -> (ProbabilityMask, &BinaryMask)) -> f64 {
    samples.iter().map(|s| {
        let (pred, gt) = predict(s);
        iou(&binarize(&pred, 0.5), gt).unwrap()
    }).sum::<f64>() / samples.len() as f64
}

/// Trains on a fixed batch, checking train IoU every `every` steps; returns
/// the step count and IoU at which `target` was first reached, or the last.
fn overfit<M: Objective>(trainer: &mut Trainer<M>, samples: &[M::Sample], steps: u64, every: u64, target: f64, score: impl Fn(&M) -> f64) -> (u64, f64) {
    let batch: Vec<&M::Sample> = samples.iter().collect();
    let mut last = 0.0;
    for step in 1..=steps {
        trainer.step_on(&batch).unwrap();
        if step % every == 0 || step == steps {
            last = score(&trainer.model);
            if last >= target {
                return (step, last);
            }
        }
    }
    (steps, last)
}

// 1
fn qes_exactness() -> Check {
    struct Rec(String, ProbabilityMask, Option<(f64, bool)>);
    impl Scored for Rec {
        fn id(&self) -> &str {
            &self.0
        }
        fn mask(&self) -> Option<&ProbabilityMask> {
            Some(&self.1)
        }
        fn set_quality(&mut self, qes: f64, retained: bool) {
            self.2 = Some((qes, retained));
        }
    }
    let cfg = QesConfig::default();
    let constant = |side: usize, v: f32| ProbabilityMask::new(side, side, vec![v; side * side]).unwrap();
    let mut half = vec![0.99f32; 8];
    half.extend([0.2f32; 8]);
    let half = ProbabilityMask::new(4, 4, half).unwrap();
    let cases = [(constant(16, 1.0), 1.0), (constant(16, 0.5), 0.0), (half.clone(), 0.5), (constant(8, 0.0), 0.0)];
    for (i, (mask, want)) in cases.iter().enumerate() {
        let got = qes_score(mask, &cfg).unwrap();
        ensure((got - want).abs() <= 1e-12, || format!("case {i}: qes {got} != {want}"))?;
    }
    ensure(!is_retained(qes_score(&half, &cfg).unwrap(), &cfg), || "score 0.5 retained at threshold 0.5".into())?;

    let scored = |num: usize, den: usize| {
        let mut data = vec![0.99f32; num];
        data.extend(vec![0.2f32; den - num]);
        ProbabilityMask::new(den, 1, data).unwrap()
    };
    let mut records = vec![Rec("a".into(), scored(9, 10), None), Rec("b".into(), scored(5, 10), None), Rec("c".into(), scored(3, 10), None)];
    let kept = filter_annotations(&mut records, &cfg).unwrap();
    ensure(kept == vec![0], || format!("kept {kept:?}, expected only the 0.9 record"))?;
    ensure(records.iter().all(|r| r.2.is_some()), || "a record was left unscored".into())?;
    Ok("1.0 / 0.0 / 0.5 / 0.0 exact; 0.5 not retained".into())
}

// 2
fn qes_monotonicity() -> Check {
    let mut r = rng(2);
    let maps: Vec<ProbabilityMask> = (0..1000)
        .map(|_| {
            let (w, h) = (r.random_range(4..48), r.random_range(4..48));
            let confident = r.random::<f64>();
            let spread = r.random_range(0.2f32..1.0);
            let data = (0..w * h)
                .map(|_| if r.random_bool(confident) { 1.0 - r.random::<f32>() * 0.1 } else { r.random::<f32>() * spread })
                .collect();
            ProbabilityMask::new(w, h, data).unwrap()
        })
        .collect();
    let scores: Vec<f64> = maps.iter().map(|m| qes_score(m, &QesConfig::default()).unwrap()).collect();
    let counts: Vec<usize> = (0..10)
        .map(|i| {
            let cfg = QesConfig { keep_threshold: i as f64 / 10.0, ..QesConfig::default() };
            scores.iter().filter(|&&s| is_retained(s, &cfg)).count()
        })
        .collect();
    ensure(counts.windows(2).all(|w| w[1] <= w[0]), || format!("counts not non-increasing: {counts:?}"))?;
    Ok(format!("kept per threshold 0.0..0.9: {counts:?}"))
}

fn exhaustive_otsu(map: &DifferenceMap) -> Option<f32> {
    let mut hist = [0u128; 256];
    for &v in &map.data {
        hist[(v * 255.0).round() as usize] += 1;
    }
    let total: u128 = hist.iter().sum();
    let sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c).sum();
    let mut best: Option<(usize, u128, u128)> = None;
    for t in 0..255 {
        let n0: u128 = hist[..=t].iter().sum();
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u128 = hist[..=t].iter().enumerate().map(|(i, &c)| i as u128 * c).sum();
        let diff = (n1 as i128 * s0 as i128 - n0 as i128 * (sum - s0) as i128).unsigned_abs();
        let (num, den) = (diff * diff, n0 * n1);
        if best.is_none_or(|(_, bn, bd)| num * bd > bn * den) {
            best = Some((t, num, den));
        }
    }
    best.map(|(t, _, _)| (t as f32 + 0.5) / 255.0)
}

// 3
fn otsu_oracle() -> Check {
    let mut r = rng(3);
    let mut maps: Vec<DifferenceMap> = (0..199)
        .map(|k| {
            let (w, h) = (r.random_range(1..64), r.random_range(1..64));
            let levels: Vec<u8> = (0..r.random_range(1..8)).map(|_| r.random()).collect();
            let data = (0..w * h)
                .map(|_| match k % 3 {
                    0 => r.random::<u8>(),
                    1 => levels[r.random_range(0..levels.len())],
                    _ => (levels[r.random_range(0..levels.len())] as i32 + r.random_range(-6..=6)).clamp(0, 255) as u8,
                } as f32 / 255.0)
                .collect();
            DifferenceMap { width: w, height: h, data }
        })
        .collect();
    maps.push(DifferenceMap { width: 8, height: 8, data: (0..64).map(|i| if i < 32 { 10.0 } else { 200.0 } / 255.0).collect() });
    for (i, map) in maps.iter().enumerate() {
        let got = otsu_threshold(map).threshold;
        let want = exhaustive_otsu(map);
        ensure(got == want, || format!("map {i}: threshold {got:?} vs exhaustive {want:?}"))?;
    }
    let split = otsu_threshold(&maps[199]);
    ensure(split.mask.data().iter().enumerate().all(|(i, &v)| (v == 1) == (i >= 32)), || "bimodal map not separated".into())?;
    Ok(format!("{} maps identical to exhaustive search", maps.len()))
}

fn unit_tokens(layer: &miml_core::tensor::Tensor<f32>) -> Vec<Vec<f64>> {
    let (c, h, w) = layer.chw();
    (0..h * w)
        .map(|t| {
            let v: Vec<f64> = (0..c).map(|ch| layer.data()[ch * h * w + t] as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn argmax_set(values: impl Iterator<Item = f64>, tol: f64) -> Vec<usize> {
    let v: Vec<f64> = values.collect();
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    (0..v.len()).filter(|&i| v[i] >= max - tol).collect()
}

// 4
fn correlation_peaks() -> Check {
    let backend = StubBackend::new(4, 16, 8);
    let mut r = rng(4);
    let n = 64;
    let mut planted = 0;
    for image in 0..50 {
        let a = noise_image(64, &mut r);
        let x = backend.extract_vit(&a).unwrap().layers[3].clone();
        let corr = correlation(&x, &x).unwrap().data;
        for k in 0..n {
            let slice = &corr.data()[k * n..(k + 1) * n];
            let best = slice.iter().enumerate().filter(|&(s, _)| s != k).map(|(_, v)| *v).fold(f32::MIN, f32::max);
            ensure(slice[k] > best, || format!("image {image}: self slice {k} peaks elsewhere ({} vs {best})", slice[k]))?;
        }

        let mut b = noise_image(64, &mut r);
        let src = r.random_range(0..n);
        let patch = a.crop((src / 8) * 8, (src % 8) * 8, 8, 8);
        let k1 = r.random_range(0..n);
        let k2 = (k1 + r.random_range(1..n)) % n;
        for k in [k1, k2] {
            paste(&mut b, &patch, (k / 8) * 8, (k % 8) * 8);
        }
        let y = backend.extract_vit(&b).unwrap().layers[3].clone();
        let cross = correlation(&x, &y).unwrap().data;
        let column: Vec<f32> = (0..n).map(|k| cross.data()[k * n + src]).collect();
        let max = column.iter().cloned().fold(f32::MIN, f32::max);
        let module_peaks: Vec<usize> = (0..n).filter(|&k| column[k] == max).collect();
        let (xs, ys) = (unit_tokens(&x), unit_tokens(&y));
        let oracle = argmax_set(ys.iter().map(|yk| yk.iter().zip(&xs[src]).map(|(p, q)| p * q).sum::<f64>()), 1e-12);
        let mut want = vec![k1, k2];
        want.sort();
        ensure(module_peaks == want && oracle == want, || format!("image {image}: peaks {module_peaks:?}, oracle {oracle:?}, planted {want:?}"))?;
        planted += 1;
    }
    Ok(format!("50 self-correlations peak on the diagonal; {planted} planted duplicates tie exactly"))
}

// 5
fn frozen_backbone() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let config = TransformerConfig { id: "vit-frozen".into(), patch: 14, dim: 32, heads: 4, depth: 5, mlp_ratio: 2 };
    let vit = Arc::new(TransformerBackbone::random(config, 5).unwrap());
    save_backbone(&dir.path().join("before.ckpt"), &vit).unwrap();
    let backend: BackendHandle = vit.clone();
    let cfg = CorrDinoConfig { aggregation_channels: 8, sr_channels: 8, denoiser: DenoiserConfig { width: 8, branch_width: 4 }, ..CorrDinoConfig::new("vit-frozen", 32, (5, 5)) };
    let model = CorrDino::<f32>::new(cfg, backend, 5).unwrap();
    let mut r = rng(5);
    let samples: Vec<CorrDinoSample> = (0..4)
        .map(|_| {
            let pair = synthesize_sdg_pair(&scene(70, &mut r), &scene(70, &mut r), &mut r).unwrap();
            CorrDinoSample { features: model.prepare(&pair.probe, &pair.reference).unwrap(), mask_a: pair.gt_mask, mask_b: pair.reference_mask }
        })
        .collect();
    let initial = model.params.clone();
    let tc = TrainConfig { iterations: 100, batch_size: 2, lr_start: 1e-3, lr_end: 1e-4, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(model, tc).unwrap();
    trainer.run(&[samples.as_slice()], |_, _| Ok(())).unwrap();
    save_backbone(&dir.path().join("after.ckpt"), &vit).unwrap();
    let (before, after) = (std::fs::read(dir.path().join("before.ckpt")).unwrap(), std::fs::read(dir.path().join("after.ckpt")).unwrap());
    ensure(before == after, || "serialized backbone changed".into())?;
    ensure(trainer.model.params != initial, || "decoder parameters did not train".into())?;
    Ok(format!("{} backbone bytes identical after 100 steps; decoder updated", before.len()))
}

// 6
fn gradient_checks() -> Check {
    let checks = [
        ("learnable aggregation", support::modules::learnable_aggregation()),
        ("multi-aspect denoiser", support::modules::multi_aspect_denoiser()),
        ("multi-scale perception", support::modules::multi_scale_perception()),
        ("nested channel attention", support::modules::nested_channel_attention()),
    ];
    let worst = checks.iter().cloned().fold(0.0, |m: f64, (_, e)| m.max(e));
    let detail = checks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst < 1e-3, || format!("max relative error {worst:.2e}: {detail}"))?;
    Ok(detail)
}

/// Pixels within Chebyshev distance `band` of any object's pre- or post-jitter mask.
fn jitter_reach(record: &miml_core::jitter::JitterRecord) -> BinaryMask {
    let (h, w) = record.forged.size();
    let mut reach = vec![0u8; w * h];
    for o in &record.objects {
        let b = o.band as isize;
        for y in 0..h {
            for x in 0..w {
                if !(o.pre_mask.get(y, x) || o.post_mask.get(y, x)) {
                    continue;
                }
                for yy in (y as isize - b).max(0)..=(y as isize + b).min(h as isize - 1) {
                    for xx in (x as isize - b).max(0)..=(x as isize + b).min(w as isize - 1) {
                        reach[yy as usize * w + xx as usize] = 1;
                    }
                }
            }
        }
    }
    BinaryMask::from_vec(w, h, reach)
}

// 7
fn jitter_locality() -> Check {
    let mut r = rng(7);
    let (mut done, mut untouched) = (0, 0usize);
    while done < 100 {
        let s = generate(&SceneConfig::square(96), &mut r);
        let labels = CcLabels::new(96, 96, s.labels.clone());
        let Ok(rec) = apply_object_jitter(&s.image, &labels, &ImageJpeg, &DeblockFilter, &JitterConfig::default(), &mut r) else { continue };
        let reach = jitter_reach(&rec);
        for y in 0..96 {
            for x in 0..96 {
                if reach.get(y, x) {
                    continue;
                }
                untouched += 1;
                for c in 0..3 {
                    ensure(rec.forged.get(c, y, x).to_bits() == s.image.get(c, y, x).to_bits(), || format!("image {done}: pixel ({y}, {x}) changed outside the band"))?;
                }
            }
        }
        let mask = rec.objects[0].pre_mask.clone();
        let (sized, post) = size_jitter(&s.image, &mask, 1.0).unwrap();
        ensure(sized == s.image && post == mask, || format!("image {done}: unit scale changed the image"))?;
        ensure(exposure_jitter(&s.image, &mask, 1.0).unwrap() == s.image, || format!("image {done}: unit gain changed the image"))?;
        ensure(blend_edges(&s.image, &s.image, &mask, 3, &mut r).unwrap() == s.image, || format!("image {done}: blending equal images changed them"))?;
        done += 1;
    }
    Ok(format!("100 images, {untouched} outside pixels bit-identical; identity parameters exact"))
}

// 8a
fn overfit_dass() -> Check {
    let mut r = rng(81);
    let samples: Vec<DassSample> = (0..8)
        .map(|_| {
            let pair = synthesize_spg_pair(&scene(64, &mut r), None, &BaselineJpeg, &mut r).unwrap();
            DassSample::new(&pair.probe, &pair.reference, pair.gt_mask.unwrap()).unwrap()
        })
        .collect();
    let tc = TrainConfig { iterations: 500, batch_size: 8, lr_start: 1e-3, lr_end: 1e-4, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(DassModel::new(DassConfig::desk(), 7), tc).unwrap();
    let score = |m: &DassModel<f32>| mean_iou(&samples, |s| (m.predict_input(&s.input, s.mask.size()), &s.mask));
    let (step, got) = overfit(&mut trainer, &samples, 500, 25, 0.8, score);
    ensure(got >= 0.8, || format!("train IoU {got:.3} after 500 steps"))?;
    Ok(format!("DASS train IoU {got:.3} at step {step} (64² pairs, desk widths)"))
}

fn jitter_samples(model: &WebIml<f32>, n: usize, side: usize, r: &mut ChaCha8Rng) -> Vec<WebImlSample> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = generate(&SceneConfig::square(side), r);
        let labels = CcLabels::new(side, side, s.labels.clone());
        let Ok(rec) = apply_object_jitter(&s.image, &labels, &BaselineJpeg, &DeblockFilter, &JitterConfig::default(), r) else { continue };
        out.push(WebImlSample { input: model.prepare(&rec.forged).unwrap(), mask: rec.gt_mask });
    }
    out
}

fn desk_webiml(rectify: bool, seed: u64) -> WebIml<f32> {
    let backend: BackendHandle = Arc::new(StubPyramidBackend::new(3, [16; 4]));
    let cfg = WebImlConfig { width: 8, self_rectification: rectify, ..WebImlConfig::new(WebImlEncoder::Backend("stub-pyramid".into())) };
    WebIml::new(cfg, Some(backend), seed).unwrap()
}

// 8b
fn overfit_webiml() -> Check {
    let model = desk_webiml(true, 5);
    let samples = jitter_samples(&model, 8, 256, &mut rng(82));
    let tc = TrainConfig { iterations: 1000, batch_size: 4, lr_start: 1e-3, lr_end: 1e-4, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(model, tc).unwrap();
    let score = |m: &WebIml<f32>| mean_iou(&samples, |s| (m.predict_input(&s.input), &s.mask));
    let sets = [samples.as_slice()];
    let mut got = (0, 0.0);
    for step in 1..=1000u64 {
        trainer.step(&sets).unwrap();
        if step % 25 == 0 {
            got = (step, score(&trainer.model));
            if got.1 >= 0.8 {
                break;
            }
        }
    }
    ensure(got.1 >= 0.8, || format!("train IoU {:.3} after 1000 steps", got.1))?;
    Ok(format!("Web-IML train IoU {:.3} at step {} (256², stub pyramid, width 8)", got.1, got.0))
}

// 8c
fn overfit_corrdino() -> Check {
    let (side, stride, grid) = (112, 14, 8);
    let backend: BackendHandle = Arc::new(StubBackend::new(3, 64, stride));
    let cfg = CorrDinoConfig { aggregation_channels: 16, sr_channels: 8, denoiser: DenoiserConfig { width: 8, branch_width: 4 }, ..CorrDinoConfig::new("stub", 64, (grid, grid)) };
    let model = CorrDino::<f32>::new(cfg, backend, 5).unwrap();
    let mut r = rng(83);
    let samples: Vec<CorrDinoSample> = (0..8)
        .map(|_| {
            let donor = scene(side, &mut r);
            let mut target = scene(side, &mut r);
            let t = r.random_range(2..=3usize);
            let (sy, sx) = (r.random_range(0..=grid - t), r.random_range(0..=grid - t));
            let (dy, dx) = (r.random_range(0..=grid - t), r.random_range(0..=grid - t));
            paste(&mut target, &donor.crop(sy * stride, sx * stride, t * stride, t * stride), dy * stride, dx * stride);
            let mask_a = BinaryMask::rect(side, side, dy * stride, dx * stride, t * stride, t * stride);
            let mask_b = BinaryMask::rect(side, side, sy * stride, sx * stride, t * stride, t * stride);
            CorrDinoSample { features: model.prepare(&target, &donor).unwrap(), mask_a: Some(mask_a), mask_b: Some(mask_b) }
        })
        .collect();
    let tc = TrainConfig { iterations: 1000, batch_size: 8, lr_start: 1e-3, lr_end: 1e-4, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(model, tc).unwrap();
    let score = |m: &CorrDino<f32>| mean_iou(&samples, |s| (m.predict_prepared(&s.features).0, s.mask_a.as_ref().unwrap()));
    let (step, got) = overfit(&mut trainer, &samples, 1000, 10, 0.5, score);
    ensure(got >= 0.5, || format!("probe-side train IoU {got:.3} after 1000 steps"))?;
    Ok(format!("Corr-DINO probe-side train IoU {got:.3} at step {step} (112², K=16, D=8)"))
}

// 9
fn ablation_direction() -> Check {
    const STEPS: u64 = 1500;
    let reference = desk_webiml(true, 0);
    let mut r = rng(9);
    let train = jitter_samples(&reference, 400, 256, &mut r);
    let held = jitter_samples(&reference, 200, 256, &mut r);
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=3u64 {
        let mut scores = [0.0; 2];
        for (i, rectify) in [true, false].into_iter().enumerate() {
            let tc = TrainConfig { iterations: STEPS, batch_size: 4, lr_start: 1e-3, lr_end: 1e-4, seed, ..TrainConfig::desk() };
            let mut trainer = Trainer::new(desk_webiml(rectify, seed), tc).unwrap();
            trainer.run(&[train.as_slice()], |_, _| Ok(())).unwrap();
            scores[i] = mean_iou(&held, |s| (trainer.model.predict_input(&s.input), &s.mask));
        }
        wins += (scores[0] >= scores[1]) as usize;
        lines.push(format!("seed {seed}: {:.3} vs {:.3}", scores[0], scores[1]));
    }
    let detail = format!("held-out IoU with vs without rectification, {}", lines.join("; "));
    ensure(wins >= 2, || detail.clone())?;
    Ok(detail)
}

// 10
fn classifier_routing() -> Check {
    let mut r = rng(10);
    let pairs = |pool: &[ImageTensor], n: usize, r: &mut ChaCha8Rng| -> Vec<PairSample> {
        (0..n)
            .map(|k| {
                let i = r.random_range(0..pool.len());
                let j = (i + 1 + r.random_range(0..pool.len() - 1)) % pool.len();
                if k % 2 == 0 {
                    synthesize_sdg_pair(&pool[i], &pool[j], r).unwrap()
                } else {
                    let splice = r.random_bool(0.5).then_some(&pool[j]);
                    synthesize_spg_pair(&pool[i], splice, &BaselineJpeg, r).unwrap()
                }
            })
            .collect()
    };
    let train_pool: Vec<ImageTensor> = (0..200).map(|_| scene(64, &mut r)).collect();
    let test_pool: Vec<ImageTensor> = (0..60).map(|_| scene(64, &mut r)).collect();
    let train = pairs(&train_pool, 5000, &mut r);
    let test = pairs(&test_pool, 500, &mut r);
    let cfg = ClassifierConfig::default();
    let samples: Vec<ClassifierSample> = train.iter().flat_map(|p| ClassifierSample::from_pair(p, cfg.input_side)).collect();
    let mut model = PairClassifier::new(cfg, 0);
    model.trained = true;
    let tc = TrainConfig { iterations: 300, batch_size: 16, lr_start: 1e-3, lr_end: 1e-4, ..TrainConfig::desk() };
    let mut trainer = Trainer::new(model, tc).unwrap();
    trainer.run(&[samples.as_slice()], |_, _| Ok(())).unwrap();
    let correct = test.iter().filter(|p| route(classify_pair(&p.probe, &p.reference, &trainer.model).unwrap()) == p.group).count();
    let acc = correct as f64 / test.len() as f64;
    ensure(acc >= 0.95, || format!("accuracy {correct}/500"))?;
    Ok(format!("{correct}/500 held-out pairs routed correctly ({:.1}%), disjoint scene pools", acc * 100.0))
}

// 11
fn metric_oracles() -> Check {
    let mask = |w: usize, on: &[usize]| {
        let mut d = vec![0u8; w];
        on.iter().for_each(|&i| d[i] = 1);
        BinaryMask::from_vec(w, 1, d)
    };
    let exact = |name: &str, got: f64, want: f64| ensure(got == want, || format!("{name}: {got} != {want}"));
    let a = mask(10, &[1, 2, 3]);
    exact("iou identical", iou(&a, &a).unwrap(), 1.0)?;
    exact("f1 identical", f1(&a, &a).unwrap(), 1.0)?;
    let b = mask(10, &[6, 7]);
    exact("iou disjoint", iou(&a, &b).unwrap(), 0.0)?;
    exact("f1 disjoint", f1(&a, &b).unwrap(), 0.0)?;
    let gt = BinaryMask::rect(20, 20, 0, 0, 10, 10);
    let pred = BinaryMask::rect(20, 20, 0, 0, 5, 10);
    exact("iou nested", iou(&pred, &gt).unwrap(), 0.5)?;
    exact("f1 nested", f1(&pred, &gt).unwrap(), 100.0 / 150.0)?;
    let empty = mask(10, &[]);
    exact("iou both empty", iou(&empty, &empty).unwrap(), 1.0)?;

    let gt4 = mask(4, &[0, 1]);
    let p = |v: Vec<f32>| ProbabilityMask::new(v.len(), 1, v).unwrap();
    exact("auc separated", pixel_auc(&p(vec![0.9, 0.8, 0.2, 0.1]), &gt4).unwrap(), 1.0)?;
    exact("auc constant", pixel_auc(&p(vec![0.3; 4]), &gt4).unwrap(), 0.5)?;
    exact("auc four pixels", pixel_auc(&p(vec![0.9, 0.4, 0.6, 0.1]), &gt4).unwrap(), 0.75)?;
    ensure(binarize(&p(vec![0.5; 4]), 0.5).area() == 0 && binarize(&p(vec![0.51; 4]), 0.5).area() == 4, || "binarize is not strict".into())?;

    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (w, h) = (r.random_range(1..40), r.random_range(1..40));
        let (da, db) = (r.random::<f64>(), r.random::<f64>());
        let a = BinaryMask::from_vec(w, h, (0..w * h).map(|_| r.random_bool(da) as u8).collect());
        let b = BinaryMask::from_vec(w, h, (0..w * h).map(|_| r.random_bool(db) as u8).collect());
        let i = iou(&a, &b).unwrap();
        worst = worst.max((f1(&a, &b).unwrap() - 2.0 * i / (1.0 + i)).abs());
    }
    ensure(worst <= 1e-12, || format!("F1 identity off by {worst:e}"))?;
    Ok(format!("hand cases exact; F1 = 2·IoU/(1+IoU) within {worst:.1e} on 1000 pairs"))
}

// 12
fn pipeline_end_to_end() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut r = rng(12);
    let pool: Vec<ImageTensor> = (0..12).map(|_| scene(64, &mut r)).collect();
    let pairs = pipeline::synthesize_pairs(&pool, 20, 0.5, &ImageJpeg, &mut r).unwrap();
    let pair_dir = root.join("pairs");
    let mut index = JsonlWriter::create(&pair_dir.join(PAIRS_INDEX)).unwrap();
    for (i, pair) in pairs.iter().enumerate() {
        index.push(&dataset::store_pair(&pair_dir, &format!("pair{i:03}"), pair).unwrap()).unwrap();
    }
    index.finish().unwrap();
    let loaded = dataset::load_pairs(&pair_dir).unwrap();

    let quick = |iterations| TrainConfig { iterations, batch_size: 4, lr_start: 1e-3, lr_end: 1e-4, ..TrainConfig::desk() };
    let ccfg = ClassifierConfig { input_side: 64, width: 8 };
    let mut classifier = PairClassifier::new(ccfg, 1);
    classifier.trained = true;
    let mut t = Trainer::new(classifier, quick(60)).unwrap();
    t.run(&[pipeline::classifier_samples(&loaded, 64).as_slice()], |_, _| Ok(())).unwrap();
    let classifier = t.model;
    let mut t = Trainer::new(DassModel::new(DassConfig::desk(), 1), quick(60)).unwrap();
    t.run(&[pipeline::dass_samples(&loaded, 64).unwrap().as_slice()], |_, _| Ok(())).unwrap();
    let dass = t.model;
    let backend: BackendHandle = Arc::new(StubBackend::new(0, 16, 8));
    let ccfg = CorrDinoConfig { aggregation_channels: 8, sr_channels: 8, denoiser: DenoiserConfig { width: 8, branch_width: 4 }, ..CorrDinoConfig::new("stub", 16, (8, 8)) };
    let corrdino = CorrDino::new(ccfg, backend, 1).unwrap();
    let samples = pipeline::corrdino_samples(&corrdino, &loaded).unwrap();
    let mut t = Trainer::new(corrdino, quick(60)).unwrap();
    t.run(&[samples.as_slice()], |_, _| Ok(())).unwrap();
    let corrdino = t.model;

    let annotator = Models { classifier: &classifier, dass: &dass, corrdino: &corrdino };
    let mut inputs: Vec<PairInput> = loaded.iter().map(|p| PairInput::from_loaded(&pair_dir, p)).collect();
    inputs.push(PairInput { id: "reinserted".into(), ..inputs[0].clone() });
    let out = root.join("annotated");
    let summary = pipeline::annotate_pairs(&inputs, &annotator, &out, &AnnotateOptions::default()).unwrap();
    ensure(summary.records.len() == 20 && summary.duplicates.len() == 1, || format!("{} records, {} duplicates", summary.records.len(), summary.duplicates.len()))?;

    let filtered = root.join("filtered").join("manifest.jsonl");
    let fs = pipeline::qes_filter(&out.join("manifest.jsonl"), &filtered, &QesConfig::default(), false).unwrap();
    let (header, records) = validate_manifest(&filtered).map_err(|e| e.to_string())?;
    ensure(records.len() == 20, || format!("filtered manifest has {} records", records.len()))?;
    let copy = root.join("copy.jsonl");
    write_manifest(&copy, header.clone(), &records).unwrap();
    ensure(load_manifest(&copy).unwrap() == (header, records.clone()), || "manifest round trip lost data".into())?;
    ensure(std::fs::read(&copy).unwrap() == std::fs::read(&filtered).unwrap(), || "manifest bytes differ after rewrite".into())?;

    let dedup = DedupIndex::default();
    for p in &loaded {
        ensure(!dedup.check_insert(&p.probe).is_duplicate(), || format!("{} rejected on first insert", p.entry.id))?;
    }
    let again = dedup.check_insert(&loaded[3].probe);
    let recompressed = ImageJpeg.decode(&ImageJpeg.encode(&loaded[5].probe, 90)).unwrap();
    let near = dedup.check_insert(&recompressed);
    ensure(again == DedupOutcome::DuplicateMd5, || format!("re-inserted probe gave {again:?}"))?;
    ensure(matches!(near, DedupOutcome::NearDuplicate(_)), || format!("q=90 recompression gave {near:?}"))?;
    Ok(format!("20 pairs annotated ({} retained, {} failed), {} rescored; manifest valid and lossless; dedup caught {again:?} and {near:?}", summary.retained(), summary.failed(), fs.rescored))
}

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let min = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { id: "1", name: "QES exactness", budget: Duration::from_secs(1), run: qes_exactness },
        Criterion { id: "2", name: "QES monotonicity sweep", budget: Duration::from_secs(10), run: qes_monotonicity },
        Criterion { id: "3", name: "OTSU oracle equivalence", budget: Duration::from_secs(30), run: otsu_oracle },
        Criterion { id: "4", name: "correlation self-peak", budget: min(1), run: correlation_peaks },
        Criterion { id: "5", name: "frozen backbone", budget: min(5), run: frozen_backbone },
        Criterion { id: "6", name: "gradient checks", budget: min(2), run: gradient_checks },
        Criterion { id: "7", name: "object jitter locality", budget: min(1), run: jitter_locality },
        Criterion { id: "8a", name: "tiny overfit: DASS", budget: min(15), run: overfit_dass },
        Criterion { id: "8b", name: "tiny overfit: Web-IML", budget: min(15), run: overfit_webiml },
        Criterion { id: "8c", name: "tiny overfit: Corr-DINO", budget: min(15), run: overfit_corrdino },
        Criterion { id: "9", name: "ablation direction", budget: min(60), run: ablation_direction },
        Criterion { id: "10", name: "classifier routing", budget: min(10), run: classifier_routing },
        Criterion { id: "11", name: "metric oracles", budget: Duration::from_secs(10), run: metric_oracles },
        Criterion { id: "12", name: "pipeline end-to-end", budget: min(5), run: pipeline_end_to_end },
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id || id.strip_prefix(w.as_str()).is_some_and(|rest| rest.starts_with(|c: char| c.is_ascii_alphabetic())));
    let std_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria.iter().filter(|c| selected(c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > c.budget => Err(format!("over budget ({:.1?} > {:.0?}); {detail}", elapsed, c.budget)),
            other => other,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} [{:>2}] {:<26} {:>8.1?}  {detail}", c.id, c.name, elapsed);
    }
    std::panic::set_hook(std_hook);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
