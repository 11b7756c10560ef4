//! Cross-validation harness: per-fold training with early stopping,
//! pooled metrics, and worst-k error reporting.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    build_classifier, load_checkpoint, lookup_backbone, save_checkpoint, BuildOptions,
    ClassifierModel,
};
use crate::dataset::{assign_folds, train_val_split, FoldAssignment, Manifest};
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::{
    cross_entropy, pooled_accuracy, softmax, PredictionRecord, SolubilityLabel, CE_CLAMP_PROB,
};
use crate::preprocess::{eval_transform, train_transform, Tensor3, TransformConfig, MIN_CROP};
use crate::rng;
use crate::segmentation::{crop_roi, detect_vial, BoundingBox, DetectorBackend};

pub use config::{DetectorConfig, TrainConfig, TransformSettings};

pub const REPORT_FILE: &str = "cv_report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const RUN_FILE: &str = "run.json";

/// True iff each of the last `patience` entries failed to improve on the
/// minimum of all entries before it by more than `min_delta`. Needs at
/// least `patience + 1` entries.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let n = history.len();
    if patience == 0 || n < patience + 1 {
        return false;
    }
    (n - patience..n).all(|i| {
        let best = history[..i].iter().copied().fold(f64::INFINITY, f64::min);
        best - history[i] <= min_delta
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub wall_time_s: f64,
}

/// Result of [`train_fold`]. Epochs are numbered from 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldTraining {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub stopped_epoch: usize,
}

/// A manifest sample after detection and cropping.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub label: SolubilityLabel,
    pub roi: Option<BoundingBox>,
    pub crop: Option<ImageRgb>,
    /// Why no crop exists.
    pub failure: Option<String>,
}

/// Every manifest sample detected and cropped once, keyed by id.
#[derive(Clone, Debug, Default)]
pub struct PreparedDataset {
    pub samples: BTreeMap<String, PreparedSample>,
}

impl PreparedDataset {
    /// Loads each image and crops the detected vial. Detection failures
    /// (and crops below the minimum transform size) are recorded, not
    /// raised; I/O and decode errors are raised.
    pub fn prepare(
        manifest: &Manifest,
        backend: &dyn DetectorBackend,
        padding: f64,
    ) -> Result<Self> {
        let samples = manifest
            .records
            .par_iter()
            .map(|r| {
                let image = manifest.load_image(r)?;
                let mut s = PreparedSample {
                    label: r.label,
                    roi: None,
                    crop: None,
                    failure: None,
                };
                match detect_vial(&image, backend) {
                    Ok(det) => {
                        let crop = crop_roi(&image, &det.bbox, padding)?;
                        if crop.width() < MIN_CROP || crop.height() < MIN_CROP {
                            s.failure =
                                Some(format!("degenerate RoI {}x{}", crop.width(), crop.height()));
                        } else {
                            s.roi = Some(det.bbox);
                            s.crop = Some(crop);
                        }
                    }
                    Err(e @ Error::VialNotFound { .. }) => s.failure = Some(e.to_string()),
                    Err(e) => return Err(e),
                }
                Ok((r.sample_id.clone(), s))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples: samples.into_iter().collect(),
        })
    }

    pub fn from_crops(
        crops: impl IntoIterator<Item = (String, SolubilityLabel, ImageRgb)>,
    ) -> Self {
        Self {
            samples: crops
                .into_iter()
                .map(|(id, label, crop)| {
                    (
                        id,
                        PreparedSample {
                            label,
                            roi: None,
                            crop: Some(crop),
                            failure: None,
                        },
                    )
                })
                .collect(),
        }
    }

    fn get(&self, id: &str) -> Result<&PreparedSample> {
        self.samples
            .get(id)
            .ok_or_else(|| Error::Config(format!("sample `{id}` is not in the prepared dataset")))
    }

    fn crop(&self, id: &str) -> Result<&ImageRgb> {
        self.get(id)?
            .crop
            .as_ref()
            .ok_or_else(|| Error::VialNotFound {
                frame: id.to_string(),
            })
    }

    pub fn usable(&self, id: &str) -> bool {
        self.samples.get(id).is_some_and(|s| s.crop.is_some())
    }

    pub fn failures(&self) -> usize {
        self.samples.values().filter(|s| s.crop.is_none()).count()
    }
}

fn eval_tensors(
    ids: &[String],
    data: &PreparedDataset,
    transform: &TransformConfig,
) -> Result<Vec<Tensor3>> {
    ids.par_iter()
        .map(|id| eval_transform(data.crop(id)?, transform))
        .collect()
}

fn logits_in_batches(
    model: &ClassifierModel,
    tensors: &[Tensor3],
    batch: usize,
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(tensors.len());
    for chunk in tensors.chunks(batch.max(1)) {
        out.extend(model.forward(chunk)?);
    }
    Ok(out)
}

/// Mean clamped CE and accuracy of the model on prepared tensors.
fn evaluate(
    model: &ClassifierModel,
    tensors: &[Tensor3],
    targets: &[SolubilityLabel],
    batch: usize,
) -> Result<(f64, f64)> {
    let logits = logits_in_batches(model, tensors, batch)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, &t) in logits.iter().zip(targets) {
        let p = softmax(*l)?;
        loss += cross_entropy(p, t)?;
        correct += (crate::metrics::argmax(p) == t) as usize;
    }
    let n = targets.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `model` on `train_ids`, monitoring validation CE on `val_ids`.
///
/// Each epoch visits the training ids in a fresh seeded order, augments
/// every sample with its own seeded stream, and evaluates the validation
/// set with the deterministic transform. Training stops on
/// [`early_stop_check`] or after `max_epochs`; the parameters of the
/// lowest-validation-loss epoch are restored before returning.
pub fn train_fold(
    model: &mut ClassifierModel,
    train_ids: &[String],
    val_ids: &[String],
    config: &TrainConfig,
    transform: &TransformConfig,
    data: &PreparedDataset,
    seed: u64,
) -> Result<FoldTraining> {
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::TooFewSamples(format!(
            "{} training and {} validation samples",
            train_ids.len(),
            val_ids.len()
        )));
    }
    let mut train_ids = train_ids.to_vec();
    train_ids.sort();
    let mut val_ids = val_ids.to_vec();
    val_ids.sort();
    let val_x = eval_tensors(&val_ids, data, transform)?;
    let val_y: Vec<_> = val_ids
        .iter()
        .map(|id| data.get(id).map(|s| s.label))
        .collect::<Result<_>>()?;

    let mut opt = model.optimizers(config.adam());
    let mut epochs = Vec::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, crate::classifier::Snapshot)> = None;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut order = train_ids.clone();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut rng::stream(seed, "epoch_order", epoch as u64),
        );
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let tag = ((epoch as u64) << 32) | b as u64;
            let inputs = chunk
                .par_iter()
                .enumerate()
                .map(|(i, id)| {
                    let mut r = rng::stream(seed, "augment", (tag << 12) ^ i as u64);
                    train_transform(data.crop(id)?, transform, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let targets: Vec<_> = chunk
                .iter()
                .map(|id| data.get(id).map(|s| s.label))
                .collect::<Result<_>>()?;
            let loss = model.train_step(
                &inputs,
                &targets,
                &mut opt,
                &mut rng::stream(seed, "dropout", tag),
            )?;
            loss_sum += loss * chunk.len() as f64;
        }
        let (val_loss, val_accuracy) = evaluate(model, &val_x, &val_y, config.batch_size)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            val_accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {:.4}, val loss {:.4}, val acc {:.4}",
            stats.train_loss,
            val_loss,
            val_accuracy
        );
        epochs.push(stats);
        history.push(val_loss);
        let improved = match &best {
            Some((b, _, _)) => val_loss < *b,
            None => true,
        };
        if improved {
            best = Some((val_loss, epoch, model.snapshot()));
        }
        if early_stop_check(&history, config.patience, config.min_delta) {
            break;
        }
    }
    let best_epoch = best.as_ref().map(|(_, e, _)| *e);
    if let Some((_, _, snap)) = &best {
        model.restore(snap);
    }
    Ok(FoldTraining {
        stopped_epoch: epochs.len(),
        epochs,
        best_epoch,
    })
}

/// Test-path predictions; samples without a crop become failure records.
pub fn predict_ids(
    model: &ClassifierModel,
    ids: &[String],
    data: &PreparedDataset,
    transform: &TransformConfig,
    fold: Option<usize>,
    batch: usize,
) -> Result<Vec<PredictionRecord>> {
    let usable: Vec<String> = ids.iter().filter(|id| data.usable(id)).cloned().collect();
    let logits = logits_in_batches(model, &eval_tensors(&usable, data, transform)?, batch)?;
    let mut by_id: BTreeMap<&str, [f64; 2]> =
        usable.iter().map(String::as_str).zip(logits).collect();
    ids.iter()
        .map(|id| {
            let target = Some(data.get(id)?.label);
            match by_id.remove(id.as_str()) {
                Some(l) => PredictionRecord::from_logits(id.clone(), l, target, fold),
                None => Ok(PredictionRecord::detection_failure(
                    id.clone(),
                    target,
                    fold,
                )),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub pooled_accuracy: f64,
    pub ce_mean: f64,
    /// Population standard deviation of per-sample CE.
    pub ce_std: f64,
}

/// Pooled accuracy and per-sample CE mean / population std.
pub fn aggregate_metrics(predictions: &[PredictionRecord]) -> Result<Aggregate> {
    let accuracy = pooled_accuracy(predictions)?;
    let losses = predictions
        .iter()
        .map(|p| {
            p.ce_loss
                .ok_or_else(|| Error::Config(format!("prediction `{}` has no target", p.sample_id)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    Ok(Aggregate {
        pooled_accuracy: accuracy,
        ce_mean: mean,
        ce_std: var.sqrt(),
    })
}

/// The `k` highest-CE predictions, ties broken by sample id.
pub fn worst_k(predictions: &[PredictionRecord], k: usize) -> Vec<PredictionRecord> {
    let mut v = predictions.to_vec();
    v.sort_by(|a, b| {
        b.ce_loss
            .unwrap_or(0.0)
            .total_cmp(&a.ce_loss.unwrap_or(0.0))
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    v.truncate(k);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub predictions: Vec<PredictionRecord>,
    pub stopped_epoch: usize,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochStats>,
}

/// Settings that shape the numbers but are not part of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub n_samples: usize,
    pub ce_clamp_probability: f64,
    pub fold_source: String,
    pub stratified_folds: bool,
    pub input_size: u32,
    pub scale_range: [f64; 2],
    pub crop_padding: f64,
    pub detector: String,
    pub detection_failures: usize,
    /// Scratch backbones are not comparable with published results.
    pub comparable_backbone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub per_fold: Vec<FoldReport>,
    pub pooled_accuracy: f64,
    pub ce_mean: f64,
    pub ce_std: f64,
    pub config_snapshot: TrainConfig,
    pub worst_k: BTreeMap<usize, Vec<PredictionRecord>>,
    pub fold_assignment: FoldAssignment,
    pub metadata: ReportMetadata,
}

impl CvReport {
    pub fn predictions(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.per_fold.iter().flat_map(|f| f.predictions.iter())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where checkpoints and the report are written.
    pub run_dir: Option<PathBuf>,
    /// Cache of exported pretrained weights.
    pub weights_dir: Option<PathBuf>,
}

/// Where the run's inputs came from; written next to the report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub manifest: PathBuf,
}

fn fold_assignment(manifest: &Manifest, config: &TrainConfig) -> Result<FoldAssignment> {
    if !config.manifest_folds {
        return assign_folds(&manifest.records, config.k_folds, config.seed);
    }
    let mut assignment = BTreeMap::new();
    for r in &manifest.records {
        match r.fold {
            Some(f) if f < config.k_folds => {
                assignment.insert(r.sample_id.clone(), f);
            }
            other => {
                return Err(Error::Config(format!(
                    "sample `{}` has fold {other:?}; manifest_folds needs every fold in [0, {})",
                    r.sample_id, config.k_folds
                )))
            }
        }
    }
    Ok(FoldAssignment {
        k: config.k_folds,
        seed: config.seed,
        assignment,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Full k-fold run: folds are assigned once, each fold trains a fresh
/// model on the remaining folds (with an internal validation split) and
/// predicts its own samples through the evaluation path.
pub fn run_cross_validation(
    manifest: &Manifest,
    config: &TrainConfig,
    backend: &dyn DetectorBackend,
    options: &RunOptions,
) -> Result<CvReport> {
    config.validate()?;
    for label in SolubilityLabel::ALL {
        let n = manifest.records.iter().filter(|r| r.label == label).count();
        if n < config.k_folds {
            return Err(Error::TooFewSamples(format!(
                "{n} {label} samples for {} folds",
                config.k_folds
            )));
        }
    }
    let spec = lookup_backbone(&config.backbone)?;
    let transform = config.transform.resolve(&spec);
    let folds = fold_assignment(manifest, config)?;
    let data = PreparedDataset::prepare(manifest, backend, config.crop_padding)?;

    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(CONFIG_FILE), config)?;
        write_json(&dir.join(FOLDS_FILE), &folds)?;
        let manifest_path = manifest.root.join("manifest.jsonl");
        let manifest_path = fs::canonicalize(&manifest_path).unwrap_or(manifest_path);
        write_json(
            &dir.join(RUN_FILE),
            &RunInfo {
                manifest: manifest_path,
            },
        )?;
    }

    let run_fold = |f: usize| -> Result<FoldReport> {
        let test = folds.members(f);
        let pool: Vec<String> = folds
            .assignment
            .iter()
            .filter(|(id, &g)| g != f && data.usable(id))
            .map(|(id, _)| id.clone())
            .collect();
        let (train, val) = train_val_split(
            &pool,
            config.val_fraction,
            rng::derive_seed(config.seed, "val_split", f as u64),
        )?;
        let fold_seed = rng::derive_seed(config.seed, "fold", f as u64);
        let build = BuildOptions {
            pretrained: config.pretrained,
            seed: fold_seed,
            input_size: Some(transform.input_size),
            weights_dir: options.weights_dir.clone(),
        };
        let mut model = build_classifier(&spec, config.strategy, &build)?;
        log::info!(
            "fold {f}: {} train, {} val, {} test",
            train.len(),
            val.len(),
            test.len()
        );
        let trained = train_fold(
            &mut model, &train, &val, config, &transform, &data, fold_seed,
        )?;
        let predictions =
            predict_ids(&model, &test, &data, &transform, Some(f), config.batch_size)?;
        if let Some(dir) = &options.run_dir {
            save_checkpoint(
                &model,
                &dir.join(format!("fold{f}")),
                transform.mean,
                transform.std,
            )?;
        }
        Ok(FoldReport {
            fold: f,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            predictions,
            stopped_epoch: trained.stopped_epoch,
            best_epoch: trained.best_epoch,
            epochs: trained.epochs,
        })
    };
    let per_fold: Vec<FoldReport> = if config.parallel_folds {
        (0..config.k_folds)
            .into_par_iter()
            .map(run_fold)
            .collect::<Result<_>>()?
    } else {
        (0..config.k_folds).map(run_fold).collect::<Result<_>>()?
    };

    let all: Vec<PredictionRecord> = per_fold
        .iter()
        .flat_map(|f| f.predictions.iter().cloned())
        .collect();
    let agg = aggregate_metrics(&all)?;
    let worst = per_fold
        .iter()
        .map(|f| (f.fold, worst_k(&f.predictions, config.worst_k)))
        .collect();
    let report = CvReport {
        pooled_accuracy: agg.pooled_accuracy,
        ce_mean: agg.ce_mean,
        ce_std: agg.ce_std,
        per_fold,
        config_snapshot: config.clone(),
        worst_k: worst,
        fold_assignment: folds,
        metadata: ReportMetadata {
            n_samples: manifest.records.len(),
            ce_clamp_probability: CE_CLAMP_PROB,
            fold_source: if config.manifest_folds {
                "manifest"
            } else {
                "stratified_round_robin"
            }
            .into(),
            stratified_folds: !config.manifest_folds,
            input_size: transform.input_size,
            scale_range: transform.scale_range,
            crop_padding: config.crop_padding,
            detector: backend.name().into(),
            detection_failures: data.failures(),
            comparable_backbone: spec.name != "tinycnn",
        },
    };
    if let Some(dir) = &options.run_dir {
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    Ok(report)
}

/// Predictions and metrics recomputed from a run's checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<usize>,
    pub predictions: Vec<PredictionRecord>,
    pub aggregate: Aggregate,
}

pub fn load_run_config(run_dir: &Path) -> Result<TrainConfig> {
    let c: TrainConfig = read_json(&run_dir.join(CONFIG_FILE))?;
    c.validate()?;
    Ok(c)
}

pub fn load_run_info(run_dir: &Path) -> Result<RunInfo> {
    read_json(&run_dir.join(RUN_FILE))
}

pub fn load_report(run_dir: &Path) -> Result<CvReport> {
    read_json(&run_dir.join(REPORT_FILE))
}

/// Re-predicts each fold's test samples with that fold's checkpoint.
pub fn evaluate_run(
    manifest: &Manifest,
    run_dir: &Path,
    backend: &dyn DetectorBackend,
    fold: Option<usize>,
) -> Result<EvalReport> {
    let config = load_run_config(run_dir)?;
    let folds: FoldAssignment = read_json(&run_dir.join(FOLDS_FILE))?;
    let selected: Vec<usize> = match fold {
        Some(f) if f < folds.k => vec![f],
        Some(f) => {
            return Err(Error::Config(format!(
                "fold {f} out of range for k = {}",
                folds.k
            )))
        }
        None => (0..folds.k).collect(),
    };
    let data = PreparedDataset::prepare(manifest, backend, config.crop_padding)?;
    let spec = lookup_backbone(&config.backbone)?;
    let transform = config.transform.resolve(&spec);
    let mut predictions = Vec::new();
    for &f in &selected {
        let (model, _) = load_checkpoint(&run_dir.join(format!("fold{f}")))?;
        let ids: Vec<String> = folds
            .members(f)
            .into_iter()
            .filter(|id| data.samples.contains_key(id))
            .collect();
        predictions.extend(predict_ids(
            &model,
            &ids,
            &data,
            &transform,
            Some(f),
            config.batch_size,
        )?);
    }
    let aggregate = aggregate_metrics(&predictions)?;
    Ok(EvalReport {
        folds: selected,
        predictions,
        aggregate,
    })
}
