//! Model specifications, checkpoint round trips and the backend registry.

use std::path::Path;
use std::sync::Arc;

use miml_core::backbone::{BackendRegistry, TransformerBackbone, TransformerConfig};
use miml_core::corrdino::{CorrDino, CorrDinoConfig, DenoiserConfig};
use miml_core::dass::{DassConfig, DassModel};
use miml_core::nn::{AdamW, AdamWConfig, ParamSet};
use miml_core::pairs::{ClassifierConfig, PairClassifier};
use miml_core::webiml::{WebIml, WebImlConfig, WebImlEncoder};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};

/// Directory scanned for `*.ckpt` backbone weights.
pub const WEIGHTS_ENV: &str = "MIML_WEIGHTS_DIR";
/// Seed of the built-in stub backends.
pub const STUB_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Classifier {
        input_side: usize,
        width: usize,
    },
    Dass {
        encoder_channels: [usize; 4],
        denoiser_width: usize,
        branch_width: usize,
    },
    Corrdino {
        backend: String,
        feature_channels: usize,
        grid: [usize; 2],
        aggregation_channels: usize,
        sr_channels: usize,
        denoiser_width: usize,
        branch_width: usize,
    },
    Webiml {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backend: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cnn_channels: Option<[usize; 4]>,
        width: usize,
        rounds: usize,
        self_rectification: bool,
    },
    Vit {
        id: String,
        patch: usize,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
    },
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Classifier { .. } => "classifier",
            ModelSpec::Dass { .. } => "dass",
            ModelSpec::Corrdino { .. } => "corrdino",
            ModelSpec::Webiml { .. } => "webiml",
            ModelSpec::Vit { .. } => "vit",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("spec serializes")
    }
}

impl From<&ClassifierConfig> for ModelSpec {
    fn from(c: &ClassifierConfig) -> Self {
        ModelSpec::Classifier { input_side: c.input_side, width: c.width }
    }
}

impl From<&DassConfig> for ModelSpec {
    fn from(c: &DassConfig) -> Self {
        ModelSpec::Dass { encoder_channels: c.encoder_channels, denoiser_width: c.denoiser.width, branch_width: c.denoiser.branch_width }
    }
}

impl From<&CorrDinoConfig> for ModelSpec {
    fn from(c: &CorrDinoConfig) -> Self {
        ModelSpec::Corrdino {
            backend: c.backend_id.clone(),
            feature_channels: c.feature_channels,
            grid: [c.grid.0, c.grid.1],
            aggregation_channels: c.aggregation_channels,
            sr_channels: c.sr_channels,
            denoiser_width: c.denoiser.width,
            branch_width: c.denoiser.branch_width,
        }
    }
}

impl From<&WebImlConfig> for ModelSpec {
    fn from(c: &WebImlConfig) -> Self {
        let (backend, cnn_channels) = match &c.encoder {
            WebImlEncoder::Backend(id) => (Some(id.clone()), None),
            WebImlEncoder::Cnn(ch) => (None, Some(*ch)),
        };
        ModelSpec::Webiml { backend, cnn_channels, width: c.width, rounds: c.rounds, self_rectification: c.self_rectification }
    }
}

impl From<&TransformerConfig> for ModelSpec {
    fn from(c: &TransformerConfig) -> Self {
        ModelSpec::Vit { id: c.id.clone(), patch: c.patch, dim: c.dim, heads: c.heads, depth: c.depth, mlp_ratio: c.mlp_ratio }
    }
}

/// A trainable model that can be written to a checkpoint.
pub trait Persist {
    fn spec(&self) -> ModelSpec;
    fn parameters(&self) -> &ParamSet<f32>;
    fn parameters_mut(&mut self) -> &mut ParamSet<f32>;
}

impl Persist for PairClassifier<f32> {
    fn spec(&self) -> ModelSpec {
        (&self.config).into()
    }
    fn parameters(&self) -> &ParamSet<f32> {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }
}

impl Persist for DassModel<f32> {
    fn spec(&self) -> ModelSpec {
        (&self.config).into()
    }
    fn parameters(&self) -> &ParamSet<f32> {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }
}

impl Persist for CorrDino<f32> {
    fn spec(&self) -> ModelSpec {
        (&self.config).into()
    }
    fn parameters(&self) -> &ParamSet<f32> {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }
}

impl Persist for WebIml<f32> {
    fn spec(&self) -> ModelSpec {
        (&self.config).into()
    }
    fn parameters(&self) -> &ParamSet<f32> {
        &self.params
    }
    fn parameters_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }
}

pub fn save_model<M: Persist>(path: &Path, model: &M, step: u64, optimizer: Option<&AdamW<f32>>) -> Result<()> {
    checkpoint::save(path, model.spec().to_json(), step, model.parameters(), optimizer)
}

/// A checkpoint with its parsed model spec.
pub struct Loaded {
    pub spec: ModelSpec,
    pub checkpoint: Checkpoint,
}

impl Loaded {
    pub fn open(path: &Path) -> Result<Self> {
        let checkpoint = checkpoint::load(path)?;
        let spec = serde_json::from_value(checkpoint.metadata.model.clone())
            .map_err(|e| Error::Checkpoint { path: path.into(), message: format!("unknown model spec: {e}") })?;
        Ok(Self { spec, checkpoint })
    }

    pub fn step(&self) -> u64 {
        self.checkpoint.metadata.step
    }

    /// Optimizer state for resuming, when the checkpoint carries one.
    pub fn optimizer(&self, config: AdamWConfig) -> Option<AdamW<f32>> {
        self.checkpoint.optimizer.as_ref().map(|(step, first, second)| AdamW { config, step: *step, first: first.clone(), second: second.clone() })
    }

    /// Builds the model described by the spec and loads its weights.
    pub fn build(&self, path: &Path, registry: &BackendRegistry) -> Result<AnyModel> {
        let mut model = match &self.spec {
            ModelSpec::Classifier { input_side, width } => {
                let mut c = PairClassifier::new(ClassifierConfig { input_side: *input_side, width: *width }, 0);
                c.trained = true;
                AnyModel::Classifier(c)
            }
            ModelSpec::Dass { encoder_channels, denoiser_width, branch_width } => AnyModel::Dass(DassModel::new(
                DassConfig { encoder_channels: *encoder_channels, denoiser: DenoiserConfig { width: *denoiser_width, branch_width: *branch_width } },
                0,
            )),
            ModelSpec::Corrdino { backend, feature_channels, grid, aggregation_channels, sr_channels, denoiser_width, branch_width } => {
                let config = CorrDinoConfig {
                    backend_id: backend.clone(),
                    aggregation_channels: *aggregation_channels,
                    sr_channels: *sr_channels,
                    denoiser: DenoiserConfig { width: *denoiser_width, branch_width: *branch_width },
                    feature_channels: *feature_channels,
                    grid: (grid[0], grid[1]),
                };
                AnyModel::CorrDino(CorrDino::new(config, registry.get(backend)?, 0)?)
            }
            ModelSpec::Webiml { backend, cnn_channels, width, rounds, self_rectification } => {
                let (encoder, handle) = match (backend, cnn_channels) {
                    (Some(id), None) => (WebImlEncoder::Backend(id.clone()), Some(registry.get(id)?)),
                    (None, Some(ch)) => (WebImlEncoder::Cnn(*ch), None),
                    _ => return Err(Error::Checkpoint { path: path.into(), message: "webiml spec needs exactly one of backend or cnn_channels".into() }),
                };
                let config = WebImlConfig { encoder, width: *width, rounds: *rounds, self_rectification: *self_rectification };
                AnyModel::WebIml(WebIml::new(config, handle, 0)?)
            }
            ModelSpec::Vit { .. } => return Err(Error::Checkpoint { path: path.into(), message: "backbone weights are not a trainable model".into() }),
        };
        checkpoint::restore_params(path, &self.checkpoint.params, model.parameters_mut())?;
        Ok(model)
    }
}

pub enum AnyModel {
    Classifier(PairClassifier<f32>),
    Dass(DassModel<f32>),
    CorrDino(CorrDino<f32>),
    WebIml(WebIml<f32>),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Classifier(_) => "classifier",
            AnyModel::Dass(_) => "dass",
            AnyModel::CorrDino(_) => "corrdino",
            AnyModel::WebIml(_) => "webiml",
        }
    }

    fn parameters_mut(&mut self) -> &mut ParamSet<f32> {
        match self {
            AnyModel::Classifier(m) => &mut m.params,
            AnyModel::Dass(m) => &mut m.params,
            AnyModel::CorrDino(m) => &mut m.params,
            AnyModel::WebIml(m) => &mut m.params,
        }
    }
}

fn wrong_kind(path: &Path, expected: &str, actual: &str) -> Error {
    Error::Checkpoint { path: path.into(), message: format!("expected a {expected} checkpoint, found {actual}") }
}

pub fn load_classifier(path: &Path) -> Result<PairClassifier<f32>> {
    match Loaded::open(path)?.build(path, &BackendRegistry::new())? {
        AnyModel::Classifier(m) => Ok(m),
        other => Err(wrong_kind(path, "classifier", other.kind())),
    }
}

pub fn load_dass(path: &Path) -> Result<DassModel<f32>> {
    match Loaded::open(path)?.build(path, &BackendRegistry::new())? {
        AnyModel::Dass(m) => Ok(m),
        other => Err(wrong_kind(path, "dass", other.kind())),
    }
}

pub fn load_corrdino(path: &Path, registry: &BackendRegistry) -> Result<CorrDino<f32>> {
    match Loaded::open(path)?.build(path, registry)? {
        AnyModel::CorrDino(m) => Ok(m),
        other => Err(wrong_kind(path, "corrdino", other.kind())),
    }
}

pub fn load_webiml(path: &Path, registry: &BackendRegistry) -> Result<WebIml<f32>> {
    match Loaded::open(path)?.build(path, registry)? {
        AnyModel::WebIml(m) => Ok(m),
        other => Err(wrong_kind(path, "webiml", other.kind())),
    }
}

pub fn save_backbone(path: &Path, backbone: &TransformerBackbone) -> Result<()> {
    checkpoint::save(path, ModelSpec::from(backbone.config()).to_json(), 0, backbone.params(), None)
}

pub fn load_backbone(path: &Path) -> Result<TransformerBackbone> {
    let loaded = Loaded::open(path)?;
    let ModelSpec::Vit { id, patch, dim, heads, depth, mlp_ratio } = loaded.spec else {
        return Err(wrong_kind(path, "vit", loaded.spec.kind()));
    };
    let config = TransformerConfig { id, patch, dim, heads, depth, mlp_ratio };
    Ok(TransformerBackbone::from_params(config, loaded.checkpoint.params)?)
}

/// Stub backends plus every backbone checkpoint in `weights_dir`.
pub fn registry_from_dir(weights_dir: Option<&Path>) -> Result<BackendRegistry> {
    let mut reg = BackendRegistry::with_stubs(STUB_SEED);
    let Some(dir) = weights_dir else { return Ok(reg) };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    for p in paths {
        reg.register(Arc::new(load_backbone(&p)?));
    }
    Ok(reg)
}

/// Registry using the directory named by [`WEIGHTS_ENV`], if set and nonempty.
pub fn registry_from_env() -> Result<BackendRegistry> {
    let dir = std::env::var_os(WEIGHTS_ENV).filter(|d| !d.is_empty()).map(std::path::PathBuf::from);
    registry_from_dir(dir.as_deref())
}
