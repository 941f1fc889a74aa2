use miml::checkpoint::{load, restore_params, rotating, save, save_rotating, KEEP_LAST};
use miml::models::{load_dass, save_model, Loaded, ModelSpec};
use miml::Error;
use miml_core::dass::{DassConfig, DassModel};
use miml_core::nn::{AdamW, AdamWConfig};
use serde_json::json;

#[test]
fn parameters_and_optimizer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = DassModel::<f32>::new(DassConfig::desk(), 4);
    let mut opt = AdamW::new(&model.params, AdamWConfig::default());
    opt.step = 17;
    opt.first[0].data_mut()[0] = 0.25;
    save(&path, json!({"kind": "test"}), 17, &model.params, Some(&opt)).unwrap();

    let ck = load(&path).unwrap();
    assert_eq!(ck.metadata.step, 17);
    let (step, first, second) = ck.optimizer.unwrap();
    assert_eq!((step, &first, &second), (17, &opt.first, &opt.second));
    let mut fresh = DassModel::<f32>::new(DassConfig::desk(), 5);
    restore_params(&path, &ck.params, &mut fresh.params).unwrap();
    assert_eq!(fresh.params, model.params);
}

#[test]
fn model_files_rebuild_the_same_network() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dass.ckpt");
    let model = DassModel::<f32>::new(DassConfig::desk(), 2);
    save_model(&path, &model, 0, None).unwrap();
    assert_eq!(Loaded::open(&path).unwrap().spec, ModelSpec::from(&DassConfig::desk()));
    assert_eq!(load_dass(&path).unwrap().params, model.params);
}

#[test]
fn rotation_keeps_the_newest() {
    let dir = tempfile::tempdir().unwrap();
    let model = DassModel::<f32>::new(DassConfig::desk(), 2);
    let opt = AdamW::new(&model.params, AdamWConfig::default());
    for step in [1000, 2000, 3000, 4000, 5000] {
        save_rotating(dir.path(), "dass", json!({}), step, &model.params, &opt).unwrap();
    }
    let kept = rotating(dir.path(), "dass").unwrap();
    assert_eq!(kept.len(), KEEP_LAST);
    assert!(kept[0].ends_with("dass-00003000.ckpt") && kept[2].ends_with("dass-00005000.ckpt"));
}

#[test]
fn corrupt_files_are_model_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"MIMLCKPT\x01\x00").unwrap();
    let err = load(&path).unwrap_err();
    assert!(matches!(err, Error::Checkpoint { .. }));
    assert_eq!(err.exit_code(), 3);
    assert_eq!(load(&dir.path().join("missing.ckpt")).unwrap_err().exit_code(), 3);
}
