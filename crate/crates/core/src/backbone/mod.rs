//! Feature-extractor boundary. Every dependence on pretrained weights goes
//! through a [`FeatureBackend`] looked up by id in a [`BackendRegistry`].

mod cnn;
mod stub;
mod vit;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

pub use cnn::{CnnBackend, CnnEncoder};
pub use stub::{StubBackend, StubPyramidBackend, DESCRIPTOR_LEN};
pub use vit::{TransformerBackbone, TransformerConfig};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_STRIDE: usize = 14;
pub const DEFAULT_STUB_CHANNELS: usize = 64;
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Vit,
    Pyramid,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Vit => "vit",
            BackendKind::Pyramid => "pyramid",
        }
    }
}

/// Token features from the last four transformer blocks; `layers[3]` is the final block.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTFeatureStack {
    pub layers: [Tensor<f32>; 4],
    pub patch_stride: usize,
}

impl ViTFeatureStack {
    pub fn grid(&self) -> (usize, usize) {
        let (_, gh, gw) = self.layers[0].chw();
        (gh, gw)
    }

    pub fn channels(&self) -> usize {
        self.layers[0].chw().0
    }

    pub fn last(&self) -> &Tensor<f32> {
        &self.layers[3]
    }
}

/// Four feature maps at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor<f32>>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::StageCount { expected: 4, actual: self.stages.len() });
        }
        for pair in self.stages.windows(2) {
            let (_, h0, w0) = pair[0].chw();
            let (_, h1, w1) = pair[1].chw();
            if (h1, w1) != (h0.div_ceil(2), w0.div_ceil(2)) {
                return Err(Error::SizeMismatch { expected: (h0.div_ceil(2), w0.div_ceil(2)), actual: (h1, w1) });
            }
        }
        Ok(())
    }
}

/// A feature extractor plugin.
pub trait FeatureBackend: Send + Sync {
    fn id(&self) -> &str;
    fn kind(&self) -> BackendKind;
    /// Channel count per output layer or stage.
    fn channels(&self) -> Vec<usize>;
    /// Pixel stride per output layer or stage.
    fn strides(&self) -> Vec<usize>;
    fn frozen(&self) -> bool {
        true
    }

    fn extract_vit(&self, _image: &ImageTensor) -> Result<ViTFeatureStack> {
        Err(Error::BackendKind { id: self.id().to_string(), expected: "vit", actual: self.kind().as_str() })
    }

    fn extract_pyramid(&self, _image: &ImageTensor) -> Result<FeaturePyramid> {
        Err(Error::BackendKind { id: self.id().to_string(), expected: "pyramid", actual: self.kind().as_str() })
    }

    /// Canonical serialization of every parameter, for immutability checks.
    fn parameter_bytes(&self) -> Vec<u8>;
}

pub type BackendHandle = Arc<dyn FeatureBackend>;

/// Backends keyed by id. Populate before sharing; lookups are read-only.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, BackendHandle>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the deterministic `stub` (ViT-kind) and `stub-pyramid` backends.
    pub fn with_stubs(seed: u64) -> Self {
        let mut reg = Self::new();
        reg.register(Arc::new(StubBackend::new(seed, DEFAULT_STUB_CHANNELS, DEFAULT_PATCH_STRIDE)));
        reg.register(Arc::new(StubPyramidBackend::new(seed, [DEFAULT_STUB_CHANNELS; 4])));
        reg
    }

    pub fn register(&mut self, backend: BackendHandle) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Result<BackendHandle> {
        self.backends.get(id).cloned().ok_or_else(|| Error::UnknownBackend(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}

pub fn extract_vit_features(image: &ImageTensor, backend: &dyn FeatureBackend) -> Result<ViTFeatureStack> {
    backend.extract_vit(image)
}

/// Pads to a multiple of 32 (reflection) and extracts four stages.
pub fn extract_pyramid_features(image: &ImageTensor, backend: &dyn FeatureBackend) -> Result<FeaturePyramid> {
    let pyr = backend.extract_pyramid(image)?;
    pyr.validate()?;
    Ok(pyr)
}

pub(crate) fn check_patch(image: &ImageTensor, patch: usize) -> Result<()> {
    let (h, w) = image.size();
    if h < patch || w < patch {
        return Err(Error::SmallerThanPatch { height: h, width: w, patch });
    }
    image.validate(1)
}

pub(crate) fn tensors_to_bytes<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lookup_and_unknown_id() {
        let reg = BackendRegistry::with_stubs(1);
        assert!(reg.get("stub").is_ok());
        assert_eq!(reg.get("dinov9").err(), Some(Error::UnknownBackend("dinov9".into())));
        let stub = reg.get("stub").unwrap();
        let img = ImageTensor::filled(64, 64, [0.5; 3]);
        assert!(matches!(stub.extract_pyramid(&img), Err(Error::BackendKind { .. })));
    }
}
