use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use miml::codec::ImageJpeg;
use miml::dataset::{self, JsonlWriter, PAIRS_INDEX, SAMPLES_INDEX};
use miml::error::{Error, Result};
use miml::io::{load_image, load_labels};
use miml::manifest::validate_manifest;
use miml::models::{self, AnyModel, Loaded, Persist};
use miml::pipeline::{self, AnnotateOptions, PairInput};
use miml_core::annotate::Models;
use miml_core::backbone::BackendRegistry;
use miml_core::corrdino::{CorrDino, CorrDinoConfig, DenoiserConfig};
use miml_core::dass::{DassConfig, DassModel};
use miml_core::image::ImageTensor;
use miml_core::jitter::{apply_object_jitter, CcLabels, JitterConfig};
use miml_core::jpeg::DeblockFilter;
use miml_core::metrics::{Perturbation, DEFAULT_THRESHOLD};
use miml_core::nn::AdamWConfig;
use miml_core::pairs::{ClassifierConfig, PairClassifier};
use miml_core::qes::QesConfig;
use miml_core::synth::{generate, SceneConfig};
use miml_core::train::{Objective, TrainConfig, Trainer};
use miml_core::webiml::{WebIml, WebImlConfig, WebImlEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Webly-supervised image manipulation localization toolkit.
#[derive(Parser)]
#[command(name = "miml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize shared-probe and shared-donor training pairs.
    SynthPairs(SynthPairsArgs),
    /// Train the SPG/SDG pair classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Train the difference-aware segmentation model on SPG pairs.
    TrainDass(TrainDassArgs),
    /// Train the correlation model on SDG pairs.
    TrainCorrdino(TrainCorrdinoArgs),
    /// Auto-annotate a pair dataset into a manifest.
    Annotate(AnnotateArgs),
    /// Re-score a manifest's masks and apply a retention threshold.
    QesFilter(QesFilterArgs),
    /// Create forged images by jittering segmented objects.
    Jitter(JitterArgs),
    /// Train the single-image localization model.
    TrainWebiml(TrainWebimlArgs),
    /// Score a checkpoint on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Check a manifest's schema, invariants and mask files.
    ManifestValidate(ManifestValidateArgs),
}

#[derive(Args)]
struct SourceArgs {
    /// Directory of source images (PNG or JPEG).
    #[arg(long, conflicts_with = "synthetic")]
    images: Option<PathBuf>,
    /// Generate this many synthetic scenes instead of reading images.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Side of generated scenes.
    #[arg(long, default_value_t = 256)]
    side: usize,
}

#[derive(Args)]
struct SynthPairsArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0.5)]
    sdg_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct JitterArgs {
    /// Source images; objects come from `<stem>.labels.png` next to each image.
    #[arg(long, conflicts_with = "synthetic")]
    images: Option<PathBuf>,
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 256)]
    side: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory; repeat for several.
    #[arg(long = "data", required = true)]
    data: Vec<PathBuf>,
    /// Sampling ratio per dataset, in `--data` order (default uniform).
    #[arg(long = "ratio")]
    ratios: Vec<f64>,
    /// Output directory for checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Start from the desk-scale profile (2000 steps, batch 4, 256 px, stub backbone).
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    input_side: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feature backend id.
    #[arg(long)]
    backend: Option<String>,
    /// Continue from the newest rotating checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = if self.desk { TrainConfig::desk() } else { TrainConfig::default() };
        c.iterations = self.iterations.unwrap_or(c.iterations);
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.input_side = self.input_side.unwrap_or(c.input_side);
        c.lr_start = self.lr_start.unwrap_or(c.lr_start);
        c.lr_end = self.lr_end.unwrap_or(c.lr_end);
        c.seed = self.seed.unwrap_or(c.seed);
        if let Some(wd) = self.weight_decay {
            c.optimizer = AdamWConfig { weight_decay: wd, ..c.optimizer };
        }
        if let Some(b) = &self.backend {
            c.backend = b.clone();
        }
        c.ratios = match self.ratios.len() {
            0 => vec![1.0; self.data.len()],
            n if n == self.data.len() => self.ratios.clone(),
            n => return Err(Error::Usage(format!("{n} ratios for {} datasets", self.data.len()))),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = ClassifierConfig::default().width)]
    width: usize,
    /// Side the pair is resampled to before classification.
    #[arg(long, default_value_t = ClassifierConfig::default().input_side)]
    classifier_side: usize,
}

#[derive(Args)]
struct TrainDassArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Use the small desk-scale network widths.
    #[arg(long)]
    small: bool,
}

#[derive(Args)]
struct TrainCorrdinoArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 64)]
    aggregation_channels: usize,
    #[arg(long, default_value_t = 128)]
    sr_channels: usize,
    #[arg(long, default_value_t = 128)]
    denoiser_width: usize,
    #[arg(long, default_value_t = 128)]
    branch_width: usize,
}

#[derive(Args)]
struct TrainWebimlArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    /// Stop at the initial prediction.
    #[arg(long)]
    no_self_rectification: bool,
    /// Train a convolutional encoder with these stage widths instead of using a backend.
    #[arg(long, value_delimiter = ',')]
    cnn_channels: Option<Vec<usize>>,
}

#[derive(Args)]
struct QesArgs {
    #[arg(long, default_value_t = QesConfig::default().t_high)]
    t_high: f64,
    #[arg(long, default_value_t = QesConfig::default().t_low)]
    t_low: f64,
    #[arg(long, default_value_t = QesConfig::default().keep_threshold)]
    keep_threshold: f64,
}

impl QesArgs {
    fn config(&self) -> Result<QesConfig> {
        let c = QesConfig { t_high: self.t_high, t_low: self.t_low, keep_threshold: self.keep_threshold };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct AnnotateArgs {
    /// Pair dataset to annotate.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    dass: PathBuf,
    #[arg(long)]
    corrdino: PathBuf,
    /// Output directory for `manifest.jsonl` and `masks/`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    qes: QesArgs,
    /// Store masks of retained records only.
    #[arg(long)]
    retained_masks_only: bool,
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

#[derive(Args)]
struct QesFilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    qes: QesArgs,
    /// Omit records that are not retained.
    #[arg(long)]
    retained_only: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Pair dataset for pair models, sample dataset for webiml.
    #[arg(long)]
    data: PathBuf,
    /// `resize=S`, `blur=K` or `jpeg=Q`.
    #[arg(long)]
    perturb: Option<String>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
}

#[derive(Args)]
struct ManifestValidateArgs {
    manifest: PathBuf,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let ext = p.extension().and_then(|x| x.to_str()).map(str::to_ascii_lowercase);
            !name.ends_with(".labels.png") && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn source_images(images: Option<&Path>, synthetic: Option<usize>, side: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(ImageTensor, Option<CcLabels>)>> {
    match (images, synthetic) {
        (Some(dir), _) => image_files(dir)?
            .into_iter()
            .map(|p| {
                let image = load_image(&p)?;
                let labels_path = p.with_extension("labels.png");
                let labels = if labels_path.is_file() {
                    let (w, h, l) = load_labels(&labels_path)?;
                    if (h, w) != image.size() {
                        return Err(Error::Data(format!("{} does not match its image size", labels_path.display())));
                    }
                    Some(CcLabels::new(w, h, l))
                } else {
                    None
                };
                Ok((image, labels))
            })
            .collect(),
        (None, Some(n)) => Ok((0..n)
            .map(|_| {
                let scene = generate(&SceneConfig::square(side), rng);
                let (h, w) = scene.image.size();
                (scene.image, Some(CcLabels::new(w, h, scene.labels)))
            })
            .collect()),
        (None, None) => Err(Error::Usage("pass --images DIR or --synthetic N".into())),
    }
}

fn synth_pairs(a: &SynthPairsArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pool: Vec<ImageTensor> = source_images(a.source.images.as_deref(), a.source.synthetic, a.source.side, &mut rng)?.into_iter().map(|(i, _)| i).collect();
    let pairs = pipeline::synthesize_pairs(&pool, a.count, a.sdg_fraction, &ImageJpeg, &mut rng)?;
    let mut index = JsonlWriter::create(&a.out.join(PAIRS_INDEX))?;
    for (i, pair) in pairs.iter().enumerate() {
        index.push(&dataset::store_pair(&a.out, &format!("pair{i:06}"), pair)?)?;
    }
    index.finish()?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn jitter(a: &JitterArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let pool: Vec<(ImageTensor, CcLabels)> =
        source_images(a.images.as_deref(), a.synthetic, a.side, &mut rng)?.into_iter().filter_map(|(i, l)| l.map(|l| (i, l))).collect();
    if pool.is_empty() {
        return Err(Error::Data("no source image has an object label map".into()));
    }
    let cfg = JitterConfig::default();
    let mut index = JsonlWriter::create(&a.out.join(SAMPLES_INDEX))?;
    let (mut written, mut skipped) = (0, 0);
    for n in 0..a.count {
        let (image, labels) = &pool[n % pool.len()];
        match apply_object_jitter(image, labels, &ImageJpeg, &DeblockFilter, &cfg, &mut rng) {
            Ok(rec) => {
                let source = dataset::describe_jitter(&rec);
                index.push(&dataset::store_sample(&a.out, &format!("jitter{n:06}"), &rec.forged, Some(&rec.gt_mask), source)?)?;
                written += 1;
            }
            Err(miml_core::Error::NoValidObject) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    index.finish()?;
    println!("wrote {written} samples to {} ({skipped} images without a valid object)", a.out.display());
    Ok(())
}

fn load_all_pairs(dirs: &[PathBuf]) -> Result<Vec<Vec<dataset::LoadedPair>>> {
    dirs.iter().map(|d| dataset::load_pairs(d)).collect()
}

fn run_training<M: Objective + Persist>(model: M, config: TrainConfig, args: &TrainArgs, prefix: &str, datasets: Vec<Vec<M::Sample>>) -> Result<()> {
    for (d, set) in args.data.iter().zip(&datasets) {
        println!("{}: {} training samples", d.display(), set.len());
    }
    let optimizer_config = config.optimizer;
    let mut trainer = Trainer::new(model, config)?;
    if args.resume {
        if let Some(path) = pipeline::latest_checkpoint(&args.out, prefix)? {
            let loaded = Loaded::open(&path)?;
            if loaded.spec != trainer.model.spec() {
                return Err(Error::Checkpoint { path, message: "model configuration differs from the requested one".into() });
            }
            miml::checkpoint::restore_params(&path, &loaded.checkpoint.params, trainer.model.parameters_mut())?;
            let optimizer = loaded.optimizer(optimizer_config).ok_or_else(|| Error::Checkpoint { path: path.clone(), message: "no optimizer state".into() })?;
            trainer.resume(optimizer, loaded.step());
            println!("resumed from {} at step {}", path.display(), loaded.step());
        }
    }
    let refs: Vec<&[M::Sample]> = datasets.iter().map(Vec::as_slice).collect();
    let every = (trainer.config.iterations / 20).max(1);
    let path = pipeline::train_with_checkpoints(&mut trainer, &refs, &args.out, prefix, |step, loss| {
        if step % every == 0 || step == 1 {
            println!("step {step} loss {loss:.5}");
        }
    })?;
    println!("saved {}", path.display());
    Ok(())
}

fn train_classifier(a: &TrainClassifierArgs) -> Result<()> {
    let config = a.train.config()?;
    let cfg = ClassifierConfig { input_side: a.classifier_side, width: a.width };
    let sets = load_all_pairs(&a.train.data)?.iter().map(|p| pipeline::classifier_samples(p, cfg.input_side)).collect();
    let mut model = PairClassifier::new(cfg, config.seed);
    model.trained = true;
    run_training(model, config, &a.train, "classifier", sets)
}

fn train_dass(a: &TrainDassArgs) -> Result<()> {
    let config = a.train.config()?;
    let side = config.input_side;
    let sets = load_all_pairs(&a.train.data)?.iter().map(|p| pipeline::dass_samples(p, side)).collect::<Result<_>>()?;
    let cfg = if a.small { DassConfig::desk() } else { DassConfig::default() };
    run_training(DassModel::new(cfg, config.seed), config, &a.train, "dass", sets)
}

fn registry() -> Result<BackendRegistry> {
    models::registry_from_env()
}

fn train_corrdino(a: &TrainCorrdinoArgs) -> Result<()> {
    let config = a.train.config()?;
    let backend = registry()?.get(&config.backend)?;
    let stride = backend.strides()[0];
    let grid = config.input_side / stride;
    if grid == 0 {
        return Err(Error::Usage(format!("input side {} is smaller than the patch stride {stride}", config.input_side)));
    }
    let cfg = CorrDinoConfig {
        aggregation_channels: a.aggregation_channels,
        sr_channels: a.sr_channels,
        denoiser: DenoiserConfig { width: a.denoiser_width, branch_width: a.branch_width },
        ..CorrDinoConfig::new(&config.backend, backend.channels()[0], (grid, grid))
    };
    let model = CorrDino::new(cfg, backend, config.seed)?;
    let sets = load_all_pairs(&a.train.data)?.iter().map(|p| pipeline::corrdino_samples(&model, p)).collect::<Result<_>>()?;
    run_training(model, config, &a.train, "corrdino", sets)
}

fn train_webiml(a: &TrainWebimlArgs) -> Result<()> {
    let mut config = a.train.config()?;
    let (encoder, backend) = match &a.cnn_channels {
        Some(ch) => {
            let stages: [usize; 4] = ch.as_slice().try_into().map_err(|_| Error::Usage(format!("--cnn-channels needs 4 widths, got {}", ch.len())))?;
            (WebImlEncoder::Cnn(stages), None)
        }
        None => {
            if a.train.backend.is_none() {
                config.backend = "stub-pyramid".into();
            }
            (WebImlEncoder::Backend(config.backend.clone()), Some(registry()?.get(&config.backend)?))
        }
    };
    let cfg = WebImlConfig { encoder, width: a.width, rounds: a.rounds, self_rectification: !a.no_self_rectification };
    let model = WebIml::new(cfg, backend, config.seed)?;
    let side = config.input_side;
    let sets = a
        .train
        .data
        .iter()
        .map(|d| {
            let samples: Vec<_> = dataset::load_samples(d)?.into_iter().map(|(_, i, m)| (i, m)).collect();
            pipeline::webiml_samples(&model, &samples, side)
        })
        .collect::<Result<_>>()?;
    run_training(model, config, &a.train, "webiml", sets)
}

fn annotate(a: &AnnotateArgs) -> Result<()> {
    let reg = registry()?;
    let classifier = models::load_classifier(&a.classifier)?;
    let dass = models::load_dass(&a.dass)?;
    let corrdino = models::load_corrdino(&a.corrdino, &reg)?;
    let annotator = Models { classifier: &classifier, dass: &dass, corrdino: &corrdino };
    let inputs: Vec<PairInput> = dataset::load_pairs(&a.pairs)?.iter().map(|p| PairInput::from_loaded(&a.pairs, p)).collect();
    let opts = AnnotateOptions { qes: a.qes.config()?, retained_masks_only: a.retained_masks_only, jobs: a.jobs };
    let s = pipeline::annotate_pairs(&inputs, &annotator, &a.out, &opts)?;
    println!(
        "annotated {} pairs: {} records, {} retained, {} failed, {} duplicates skipped",
        inputs.len(),
        s.records.len(),
        s.retained(),
        s.failed(),
        s.duplicates.len()
    );
    Ok(())
}

fn qes_filter(a: &QesFilterArgs) -> Result<()> {
    let s = pipeline::qes_filter(&a.manifest, &a.out, &a.qes.config()?, a.retained_only)?;
    println!("{} records, {} rescored, {} retained, {} written to {}", s.total, s.rescored, s.retained, s.written, a.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let perturbation = a.perturb.as_deref().map(Perturbation::parse).transpose().map_err(|e| Error::Usage(e.to_string()))?;
    let model = Loaded::open(&a.model)?.build(&a.model, &registry()?)?;
    let result = match &model {
        AnyModel::WebIml(m) => {
            let samples: Vec<_> = dataset::load_samples(&a.data)?.into_iter().map(|(_, i, m)| (i, m)).collect();
            pipeline::evaluate_images(m, &samples, perturbation.as_ref(), &ImageJpeg, a.threshold)?
        }
        other => pipeline::evaluate_pairs(other, &dataset::load_pairs(&a.data)?, perturbation.as_ref(), &ImageJpeg, a.threshold)?,
    };
    print!("{}", result.to_text());
    Ok(())
}

fn manifest_validate(a: &ManifestValidateArgs) -> Result<()> {
    let (header, records) = validate_manifest(&a.manifest)?;
    let retained = records.iter().filter(|r| r.retained).count();
    println!("ok: {} records, {retained} retained (keep_threshold {})", records.len(), header.keep_threshold);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthPairs(a) => synth_pairs(a),
        Command::TrainClassifier(a) => train_classifier(a),
        Command::TrainDass(a) => train_dass(a),
        Command::TrainCorrdino(a) => train_corrdino(a),
        Command::Annotate(a) => annotate(a),
        Command::QesFilter(a) => qes_filter(a),
        Command::Jitter(a) => jitter(a),
        Command::TrainWebiml(a) => train_webiml(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ManifestValidate(a) => manifest_validate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
