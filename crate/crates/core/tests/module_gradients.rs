mod support;

use support::modules;

const TOL: f64 = 1e-3;

#[test]
fn learnable_aggregation() {
    let err = modules::learnable_aggregation();
    assert!(err < TOL, "{err}");
}

#[test]
fn multi_aspect_denoiser() {
    let err = modules::multi_aspect_denoiser();
    assert!(err < TOL, "{err}");
}

#[test]
fn feature_super_resolution() {
    let err = modules::feature_super_resolution();
    assert!(err < TOL, "{err}");
}

#[test]
fn multi_scale_perception() {
    let err = modules::multi_scale_perception();
    assert!(err < TOL, "{err}");
}

#[test]
fn nested_channel_attention() {
    let err = modules::nested_channel_attention();
    assert!(err < TOL, "{err}");
}

#[test]
fn self_rectification() {
    let err = modules::self_rectification();
    assert!(err < TOL, "{err}");
}

#[test]
fn cnn_encoder() {
    let err = modules::cnn_encoder();
    assert!(err < TOL, "{err}");
}

mod full_models {
    use std::sync::Arc;

    use miml_core::backbone::StubBackend;
    use miml_core::corrdino::{CorrDino, CorrDinoConfig, DenoiserConfig};
    use miml_core::dass::{dass_input, DassConfig, DassModel};
    use miml_core::image::{BinaryMask, ImageTensor};
    use miml_core::synth::{generate, SceneConfig};
    use miml_core::webiml::{WebIml, WebImlConfig, WebImlEncoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::support::{jitter_biases, max_param_error};
    use super::TOL;

    fn scene(seed: u64) -> ImageTensor {
        generate(&SceneConfig::square(32), &mut ChaCha8Rng::seed_from_u64(seed)).image
    }

    fn mask() -> BinaryMask {
        BinaryMask::rect(32, 32, 6, 9, 12, 10)
    }

    #[test]
    fn web_iml_with_rectification() {
        let cfg = WebImlConfig { encoder: WebImlEncoder::Cnn([3, 4, 4, 4]), width: 4, rounds: 2, self_rectification: true };
        let mut model = WebIml::<f64>::new(cfg, None, 3).unwrap();
        jitter_biases(&mut model.params);
        let input = model.prepare(&scene(1)).unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        let err = max_param_error(&model.params, &ids, 4, |t| model.loss(t, &input, &mask()));
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn dass() {
        let cfg = DassConfig { encoder_channels: [3, 4, 4, 4], denoiser: DenoiserConfig { width: 4, branch_width: 3 } };
        let mut model = DassModel::<f64>::new(cfg, 4);
        jitter_biases(&mut model.params);
        let input = dass_input::<f64>(&scene(2), &scene(3)).unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        let err = max_param_error(&model.params, &ids, 4, |t| model.loss(t, &input, &mask()));
        assert!(err < TOL, "{err}");
    }

    #[test]
    fn corr_dino_both_sides() {
        let backend = Arc::new(StubBackend::new(5, 6, 8));
        let cfg = CorrDinoConfig {
            aggregation_channels: 3,
            sr_channels: 4,
            denoiser: DenoiserConfig { width: 4, branch_width: 3 },
            ..CorrDinoConfig::new("stub", 6, (4, 4))
        };
        let mut model = CorrDino::<f64>::new(cfg, backend, 6).unwrap();
        jitter_biases(&mut model.params);
        let f = model.prepare(&scene(4), &scene(5)).unwrap();
        let ids: Vec<_> = model.params.ids().collect();
        let (ma, mb) = (mask(), BinaryMask::rect(32, 32, 20, 2, 8, 14));
        let err = max_param_error(&model.params, &ids, 4, |t| model.loss(t, &f, Some(&ma), Some(&mb)).unwrap());
        assert!(err < TOL, "{err}");
    }
}
