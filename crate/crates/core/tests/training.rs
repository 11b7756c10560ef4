use std::path::Path;

use solis_core::classifier::{
    build_classifier, load_checkpoint, lookup_backbone, BuildOptions, TrainStrategy,
};
use solis_core::dataset::{
    generate_synthetic, load_manifest, render_sample, BackgroundMode, Manifest, SynthConfig,
};
use solis_core::screening::screen_image;
use solis_core::segmentation::FallbackDetector;
use solis_core::trainer::{
    aggregate_metrics, evaluate_run, load_report, predict_ids, run_cross_validation, train_fold,
    PreparedDataset, RunOptions, TrainConfig,
};
use solis_core::{Error, ImageRgb, SolubilityLabel};

fn synth_config(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_samples: n,
        seed,
        background_modes: vec![BackgroundMode::Plain, BackgroundMode::Gradient],
        ..SynthConfig::default()
    }
}

fn synth(dir: &Path, n: usize, seed: u64) -> Manifest {
    load_manifest(
        &generate_synthetic(&synth_config(n, seed), dir).unwrap(),
        true,
    )
    .unwrap()
}

fn ids(m: &Manifest) -> Vec<String> {
    m.records.iter().map(|r| r.sample_id.clone()).collect()
}

#[test]
fn train_fold_fits_synthetic_data_and_restores_best_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 200, 11);
    let config = TrainConfig {
        max_epochs: 12,
        ..TrainConfig::default()
    };
    let spec = lookup_backbone("tinycnn").unwrap();
    let transform = config.transform.resolve(&spec);
    let detector = FallbackDetector::default();
    let data = PreparedDataset::prepare(&manifest, &detector, config.crop_padding).unwrap();
    assert_eq!(data.failures(), 0);
    let ids = ids(&manifest);
    let (train, val) = ids.split_at(160);
    let options = BuildOptions {
        seed: 3,
        ..BuildOptions::default()
    };
    let mut model = build_classifier(&spec, TrainStrategy::FineTune, &options).unwrap();
    let out = train_fold(&mut model, train, val, &config, &transform, &data, 5).unwrap();

    assert!(out.stopped_epoch <= config.max_epochs);
    let best = out.best_epoch.unwrap();
    let best_stats = &out.epochs[best - 1];
    assert!(best_stats.val_accuracy >= 0.95, "{best_stats:?}");
    assert!(out.epochs.iter().all(|e| e.val_loss >= best_stats.val_loss));

    // The returned parameters are the best epoch's, not the last epoch's.
    let preds = predict_ids(&model, val, &data, &transform, None, 32).unwrap();
    let agg = aggregate_metrics(&preds).unwrap();
    assert!((agg.ce_mean - best_stats.val_loss).abs() < 1e-9);

    // A held-out dissolved frame from another seed goes through the cascade.
    let held_out = (0..20)
        .map(|i| render_sample(&synth_config(20, 99), i).unwrap())
        .find(|s| s.record.label == SolubilityLabel::Dissolved)
        .unwrap();
    let a = screen_image(
        "held_out",
        &held_out.image,
        &model,
        &detector,
        &transform,
        config.crop_padding,
    )
    .unwrap();
    let b = screen_image(
        "held_out",
        &held_out.image,
        &model,
        &detector,
        &transform,
        config.crop_padding,
    )
    .unwrap();
    assert_eq!(a.predicted, SolubilityLabel::Dissolved);
    assert_eq!(a, b);

    let black = ImageRgb::filled(64, 64, [0, 0, 0]);
    match screen_image("black", &black, &model, &detector, &transform, 0.05) {
        Err(Error::VialNotFound { frame }) => assert_eq!(frame, "black"),
        other => panic!("expected vial not found, got {other:?}"),
    }
}

#[test]
fn zero_epochs_returns_untouched_model() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 20, 2);
    let config = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    let spec = lookup_backbone("tinycnn").unwrap();
    let data = PreparedDataset::prepare(&manifest, &FallbackDetector::default(), 0.05).unwrap();
    let mut model =
        build_classifier(&spec, TrainStrategy::FineTune, &BuildOptions::default()).unwrap();
    let before = model.snapshot();
    let ids = ids(&manifest);
    let out = train_fold(
        &mut model,
        &ids[..15],
        &ids[15..],
        &config,
        &config.transform.resolve(&spec),
        &data,
        0,
    )
    .unwrap();
    assert!(out.epochs.is_empty());
    assert_eq!((out.best_epoch, out.stopped_epoch), (None, 0));
    let mut untouched =
        build_classifier(&spec, TrainStrategy::FineTune, &BuildOptions::default()).unwrap();
    untouched.restore(&before);
    assert_eq!(
        model.parameter_hash(solis_core::classifier::ParamSubset::All),
        untouched.parameter_hash(solis_core::classifier::ParamSubset::All)
    );
}

#[test]
fn empty_splits_are_rejected() {
    let spec = lookup_backbone("tinycnn").unwrap();
    let config = TrainConfig::default();
    let mut model =
        build_classifier(&spec, TrainStrategy::FineTune, &BuildOptions::default()).unwrap();
    let data = PreparedDataset::default();
    let r = train_fold(
        &mut model,
        &[],
        &["x".into()],
        &config,
        &config.transform.resolve(&spec),
        &data,
        0,
    );
    assert!(matches!(r, Err(Error::TooFewSamples(_))));
}

#[test]
fn cross_validation_writes_a_reloadable_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), 40, 5);
    let config = TrainConfig {
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let run_dir = dir.path().join("run");
    let options = RunOptions {
        run_dir: Some(run_dir.clone()),
        weights_dir: None,
    };
    let detector = FallbackDetector::default();
    let report = run_cross_validation(&manifest, &config, &detector, &options).unwrap();

    assert_eq!(report.per_fold.len(), 5);
    assert_eq!(report.predictions().count(), 40);
    let mut seen: Vec<_> = report.predictions().map(|p| p.sample_id.clone()).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 40);
    for f in &report.per_fold {
        assert!(f.predictions.iter().all(|p| p.fold == Some(f.fold)));
        assert_eq!(f.n_train + f.n_val + f.n_test, 40);
        assert!(report.worst_k[&f.fold].len() <= config.worst_k);
    }
    assert_eq!(load_report(&run_dir).unwrap(), report);

    let eval = evaluate_run(&manifest, &run_dir, &detector, None).unwrap();
    assert!((eval.aggregate.ce_mean - report.ce_mean).abs() < 1e-12);
    assert_eq!(eval.aggregate.pooled_accuracy, report.pooled_accuracy);
    let one = evaluate_run(&manifest, &run_dir, &detector, Some(2)).unwrap();
    assert_eq!(one.predictions, report.per_fold[2].predictions);
    assert!(evaluate_run(&manifest, &run_dir, &detector, Some(5)).is_err());

    let (model, sidecar) = load_checkpoint(&run_dir.join("fold0")).unwrap();
    assert_eq!(sidecar.backbone, "tinycnn");
    assert_eq!(model.input_size(), 64);
}

#[test]
fn cross_validation_needs_k_samples_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), 8, 1);
    let r = run_cross_validation(
        &manifest,
        &TrainConfig::default(),
        &FallbackDetector::default(),
        &RunOptions::default(),
    );
    assert!(matches!(r, Err(Error::TooFewSamples(_))));
}
