use std::path::Path;

use decodet::container::encode;
use decodet::dataset::{generate_toy_dataset, Manifest, ToyConfig};
use decodet::model::{ModelConfig, ToyModel};
use decodet::train::{freeze_mask, pdft, run_stage, PdftSettings, StageConfig};

fn toy(dir: &Path, n: usize) -> Manifest {
    let cfg = ToyConfig {
        num_images: n,
        seed: 11,
        ..ToyConfig::default()
    };
    generate_toy_dataset(&cfg, dir).unwrap().manifest
}

fn small_model(seed: u64) -> ToyModel {
    ToyModel::new(ModelConfig::default(), seed).unwrap()
}

fn bytes(m: &ToyModel) -> Vec<u8> {
    encode(m, "m.bin").1
}

#[test]
fn zero_epochs_leave_the_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 4);
    let model = small_model(1);
    let stage = StageConfig {
        epochs: 0,
        ..StageConfig::default()
    };
    let out = run_stage(&model, &m, dir.path(), &stage).unwrap();
    assert_eq!(bytes(&out.model), bytes(&model));
    assert!(out.log.is_empty());
}

#[test]
fn freezing_everything_leaves_the_model_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 4);
    let model = small_model(2);
    let frozen: Vec<String> = ["backbone", "neck", "head"].map(String::from).to_vec();
    assert!(freeze_mask(&model, &frozen).unwrap().iter().all(|&f| f));
    let stage = StageConfig {
        epochs: 1,
        frozen_prefixes: frozen,
        ..StageConfig::default()
    };
    let out = run_stage(&model, &m, dir.path(), &stage).unwrap();
    assert_eq!(bytes(&out.model), bytes(&model));
    assert_eq!(out.log[0].frozen_param_count, model.param_count());
}

#[test]
fn unknown_freeze_prefix_is_rejected() {
    let model = small_model(0);
    assert!(freeze_mask(&model, &["backbone.9".to_string()]).is_err());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 16);
    let model = small_model(3);
    let stage = StageConfig {
        epochs: 3,
        lr: 0.01,
        seed: 5,
        ..StageConfig::default()
    };
    let a = run_stage(&model, &m, dir.path(), &stage).unwrap();
    let b = run_stage(&model, &m, dir.path(), &stage).unwrap();
    assert_eq!(bytes(&a.model), bytes(&b.model));
    assert_eq!(a.log, b.log);
    let losses: Vec<f64> = a.log.iter().map(|r| r.mean_loss).collect();
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "{losses:?}"
    );
}

#[test]
fn pdft_freezes_the_requested_stages() {
    let dir = tempfile::tempdir().unwrap();
    let m = toy(dir.path(), 4);
    let model = small_model(4);
    let cfg = PdftSettings::default().derive().unwrap();
    assert_eq!(cfg.stage2.lr, 0.002);
    let out = pdft(&model, (&m, dir.path()), (&m, dir.path()), &cfg).unwrap();
    assert_eq!(out.stage1.backbone[0], model.backbone[0]);
    assert_eq!(out.stage2.backbone[0], model.backbone[0]);
    for s in 1..3 {
        assert_eq!(out.stage2.backbone[s], out.stage1.backbone[s]);
    }
    assert_ne!(out.stage1.backbone[1], model.backbone[1]);
    assert_ne!(out.stage2.head, out.stage1.head);
}

#[test]
fn pdft_rejects_a_mismatched_learning_rate() {
    let mut cfg = PdftSettings::default().derive().unwrap();
    cfg.stage2.lr = 0.0021;
    assert!(cfg.validate().is_err());
}
