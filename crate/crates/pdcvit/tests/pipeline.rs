//! Train/eval pipeline behaviors: null updates, loss descent, abort on
//! non-finite loss, feature export, and contract errors.

use std::path::Path;

use pdcvit::checkpoint::Checkpoint;
use pdcvit::dataset::DatasetManifest;
use pdcvit::error::Error;
use pdcvit::eval;
use pdcvit::synth::{gen_synthetic, SynthSpec};
use pdcvit::train::{self, TrainConfig, VitPreset};
use pdcvit_core::pdc::Variant;

fn tiny_dataset(dir: &Path, classes: usize, per_class: usize, amplitude: f64, seed: u64) -> DatasetManifest {
    let spec = SynthSpec {
        num_classes: classes,
        images_per_class: per_class,
        image_size: 16,
        amplitude,
        content_seed: seed.wrapping_mul(3).wrapping_add(1),
        fingerprint_seed: seed.wrapping_mul(5).wrapping_add(2),
    };
    let mut manifest = gen_synthetic(&spec, dir).unwrap();
    manifest.split(seed);
    manifest
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        epochs: 2,
        seed,
        variant: Variant::Pdc,
        preset: VitPreset::Desk,
        branch_channels: 8,
        crop: 0,
        val_fraction: 0.0,
        stop_at_test_accuracy: None,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 8, 0.05, 5);
    let mut config = tiny_config(5);
    config.lr = 0.0;
    config.epochs = 2;
    let result = train::train(&manifest, &config, &dir.path().join("out")).unwrap();
    // Reference: the untrained model with the same seed.
    let fresh = pdcvit_core::model::PdcVitModel::init(
        config.model_config(16, 2).unwrap(),
        config.seed,
    )
    .unwrap();
    for ((name, trained), (_, init)) in result
        .checkpoint
        .model
        .named_params()
        .iter()
        .zip(fresh.named_params().iter())
    {
        assert!(trained.same_values(init), "parameter {name} moved under lr = 0");
    }
}

#[test]
fn toy_training_loss_strictly_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 12, 0.08, 9);
    let mut config = tiny_config(9);
    config.epochs = 3;
    let result = train::train(&manifest, &config, &dir.path().join("out")).unwrap();
    assert_eq!(result.history.len(), 3);
    for pair in result.history.windows(2) {
        assert!(
            pair[1].train_loss < pair[0].train_loss,
            "loss did not decrease: {} -> {}",
            pair[0].train_loss,
            pair[1].train_loss
        );
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 10, 0.05, 3);
    let mut config = tiny_config(3);
    // A pathological step size overflows activations on the next batch.
    config.lr = 1e300;
    config.batch_size = 8;
    let err = train::train(&manifest, &config, &dir.path().join("out")).unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, loss, .. } => {
            assert_eq!(epoch, 1);
            assert!(!loss.is_finite());
        }
        Error::Contract(msg) => assert!(msg.contains("non-finite"), "{msg}"),
        other => panic!("expected non-finite abort, got {other}"),
    }
}

#[test]
fn val_fraction_holds_items_out_but_still_trains() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 10, 0.05, 4);
    let mut config = tiny_config(4);
    config.val_fraction = 0.25;
    config.epochs = 1;
    let result = train::train(&manifest, &config, &dir.path().join("out")).unwrap();
    assert_eq!(result.history.len(), 1);
    assert!(result.history[0].train_loss.is_finite());
}

#[test]
fn evaluate_rejects_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 8, 0.05, 6);
    let config = tiny_config(6);
    let result = train::train(&manifest, &config, &dir.path().join("out")).unwrap();

    let other = tiny_dataset(&dir.path().join("other"), 3, 8, 0.05, 6);
    let err = eval::evaluate(&result.checkpoint, &other).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn export_features_csv_shape_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 8, 0.05, 8);
    let mut config = tiny_config(8);
    config.epochs = 1;
    let result = train::train(&manifest, &config, &dir.path().join("out")).unwrap();

    let f1 = dir.path().join("f1.csv");
    let f2 = dir.path().join("f2.csv");
    eval::export_features(&result.checkpoint, &manifest, &f1).unwrap();
    eval::export_features(&result.checkpoint, &manifest, &f2).unwrap();
    let text = std::fs::read_to_string(&f1).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let dim = result.checkpoint.model.config.vit.dim;
    // Header names the columns label,f0..f{d-1}.
    let mut want_header = String::from("label");
    for i in 0..dim {
        want_header.push_str(&format!(",f{i}"));
    }
    assert_eq!(lines[0], want_header);
    // One row per test item, 1 + dim columns each.
    let n_test = manifest.count_in(pdcvit::dataset::Split::Test);
    assert_eq!(lines.len(), 1 + n_test);
    for row in &lines[1..] {
        assert_eq!(row.split(',').count(), 1 + dim);
    }
    // Deterministic export.
    assert_eq!(text, std::fs::read_to_string(&f2).unwrap());
}

#[test]
fn best_checkpoint_tracks_lowest_test_loss() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(&dir.path().join("data"), 2, 10, 0.05, 12);
    let mut config = tiny_config(12);
    config.epochs = 3;
    let result = train::train(&manifest, &config, &dir.path().join("out")).unwrap();
    let best = Checkpoint::load(&result.best_path).unwrap();
    let report = eval::evaluate(&best, &manifest).unwrap();
    let min_loss = result.history.iter().map(|r| r.test_loss).fold(f64::INFINITY, f64::min);
    assert!(
        (report.test_loss - min_loss).abs() < 1e-9,
        "best checkpoint loss {} vs recorded minimum {min_loss}",
        report.test_loss
    );
    // Confusion row sums equal the per-class test counts.
    for (c, row) in report.confusion.iter().enumerate() {
        let class_count = manifest
            .items_in(pdcvit::dataset::Split::Test)
            .filter(|it| it.class_index == c)
            .count();
        assert_eq!(row.iter().sum::<usize>(), class_count, "class {c}");
    }
    report.check_consistency().unwrap();
}
