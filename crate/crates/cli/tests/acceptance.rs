//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Everything runs with `--no-download`
//! and without a weights cache.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use solis_core::classifier::{
    build_classifier, head_param_count, lookup_backbone, BuildOptions, ParamSubset, TrainStrategy,
};
use solis_core::dataset::{
    assign_folds, generate_synthetic, load_manifest, render_sample, BackgroundMode, SampleRecord,
    SynthConfig,
};
use solis_core::metrics::{argmax, cross_entropy, softmax};
use solis_core::preprocess::eval_transform;
use solis_core::screening::{screen_buffered, BufferPolicy, FrameClassifier};
use solis_core::segmentation::{detect_vial, BoundingBox, FallbackDetector};
use solis_core::trainer::{
    aggregate_metrics, early_stop_check, train_fold, CvReport, PreparedDataset, TrainConfig,
};
use solis_core::{Error, ImageRgb, PredictionRecord, SolubilityLabel};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn solis(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_solis"))
        .arg("--no-download")
        .args(args)
        .env_remove("SOLIS_CACHE")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "solis {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synthetic_end_to_end(dir: &Path) -> Outcome {
    let data = dir.join("e2e");
    let run = dir.join("e2e_run");
    let start = Instant::now();
    solis(&[
        "gen-synth",
        "--out",
        p(&data),
        "--n",
        "600",
        "--seed",
        "7",
        "--background",
        "plain,gradient",
    ])?;
    solis(&[
        "train",
        "--manifest",
        p(&data.join("manifest.jsonl")),
        "--out",
        p(&run),
    ])?;
    let report = CvReport::from_json(&std::fs::read_to_string(run.join("cv_report.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let summary = format!(
        "accuracy {:.4} (>= 0.95), ce_mean {:.4} (<= 0.2), {:.0}s",
        report.pooled_accuracy,
        report.ce_mean,
        start.elapsed().as_secs_f64()
    );
    check(report.config_snapshot.backbone == "tinycnn", || {
        "not tinycnn".into()
    })?;
    check(
        report.pooled_accuracy >= 0.95 && report.ce_mean <= 0.2,
        || summary.clone(),
    )?;
    Ok(summary)
}

fn metric_oracle() -> Outcome {
    let fixture: serde_json::Value =
        serde_json::from_str(include_str!("fixtures/metric_oracle.json"))
            .map_err(|e| e.to_string())?;
    let cases = fixture["cases"].as_array().unwrap();
    check(cases.len() == 1000, || format!("{} cases", cases.len()))?;
    let mut worst = 0.0f64;
    let mut preds = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let l = [
            c["logits"][0].as_f64().unwrap(),
            c["logits"][1].as_f64().unwrap(),
        ];
        let target = SolubilityLabel::from_code(c["target"].as_u64().unwrap() as u8).unwrap();
        let want = [
            c["probabilities"][0].as_f64().unwrap(),
            c["probabilities"][1].as_f64().unwrap(),
        ];
        let probs = softmax(l).map_err(|e| e.to_string())?;
        let ce = cross_entropy(probs, target).map_err(|e| e.to_string())?;
        let ce_err = (ce - c["ce"].as_f64().unwrap()).abs();
        worst = worst
            .max((probs[0] - want[0]).abs())
            .max((probs[1] - want[1]).abs())
            .max(ce_err);
        let rec = PredictionRecord::from_logits(i.to_string(), l, Some(target), Some(0))
            .map_err(|e| e.to_string())?;
        check(rec.predicted == argmax(probs), || {
            format!("case {i}: argmax")
        })?;
        preds.push(rec);
    }
    let agg = aggregate_metrics(&preds).map_err(|e| e.to_string())?;
    worst = worst
        .max((agg.ce_mean - fixture["ce_mean"].as_f64().unwrap()).abs())
        .max((agg.ce_std - fixture["ce_std"].as_f64().unwrap()).abs());
    check(worst <= 1e-6, || format!("max abs error {worst:e}"))?;
    Ok(format!("1000 cases, max abs error {worst:.1e} (<= 1e-6)"))
}

fn small_dataset(dir: &Path, n: usize) -> (solis_core::dataset::Manifest, PreparedDataset) {
    let cfg = SynthConfig {
        n_samples: n,
        seed: 5,
        ..SynthConfig::default()
    };
    let manifest = load_manifest(&generate_synthetic(&cfg, dir).unwrap(), true).unwrap();
    let data = PreparedDataset::prepare(&manifest, &FallbackDetector::default(), 0.05).unwrap();
    (manifest, data)
}

fn freeze_invariant(dir: &Path) -> Outcome {
    let (manifest, data) = small_dataset(&dir.join("freeze"), 60);
    let spec = lookup_backbone("tinycnn").unwrap();
    let config = TrainConfig {
        max_epochs: 3,
        strategy: TrainStrategy::FeatureExtract,
        ..TrainConfig::default()
    };
    let mut model = build_classifier(
        &spec,
        TrainStrategy::FeatureExtract,
        &BuildOptions::default(),
    )
    .unwrap();
    let (b0, h0) = (
        model.parameter_hash(ParamSubset::Backbone),
        model.parameter_hash(ParamSubset::Head),
    );
    let ids: Vec<String> = manifest
        .records
        .iter()
        .map(|r| r.sample_id.clone())
        .collect();
    let out = train_fold(
        &mut model,
        &ids[..48],
        &ids[48..],
        &config,
        &config.transform.resolve(&spec),
        &data,
        1,
    )
    .map_err(|e| e.to_string())?;
    check(out.epochs.len() == 3, || {
        format!("{} epochs", out.epochs.len())
    })?;
    check(model.parameter_hash(ParamSubset::Backbone) == b0, || {
        "backbone hash changed".into()
    })?;
    check(model.parameter_hash(ParamSubset::Head) != h0, || {
        "head hash unchanged".into()
    })?;
    let tiny = model.trainable_scalars();
    check(tiny == head_param_count(64, 2), || {
        format!("tinycnn trainable {tiny}")
    })?;
    let resnet = solis_core::classifier::ClassifierModel::uninitialized(
        &lookup_backbone("resnet18").unwrap(),
        TrainStrategy::FeatureExtract,
        None,
        0,
    )
    .unwrap()
    .trainable_scalars();
    check(resnet == 1026 && head_param_count(512, 2) == 1026, || {
        format!("resnet18 trainable {resnet}")
    })?;
    Ok(format!(
        "backbone hash fixed, head hash changed, trainable {tiny} (tinycnn), {resnet} (resnet18)"
    ))
}

fn gradient_check(dir: &Path) -> Outcome {
    let (manifest, data) = small_dataset(&dir.join("grad"), 8);
    let spec = lookup_backbone("tinycnn").unwrap();
    let transform = TrainConfig::default().transform.resolve(&spec);
    let mut model = build_classifier(
        &spec,
        TrainStrategy::FineTune,
        &BuildOptions {
            seed: 9,
            ..Default::default()
        },
    )
    .unwrap();
    let batch: Vec<_> = manifest
        .records
        .iter()
        .map(|r| {
            eval_transform(
                data.samples[&r.sample_id].crop.as_ref().unwrap(),
                &transform,
            )
            .unwrap()
        })
        .collect();
    let targets: Vec<_> = manifest.records.iter().map(|r| r.label).collect();
    let feats = model.features(&batch).map_err(|e| e.to_string())?;
    let g = model.head_gradients(&feats, &targets);
    let (w0, bias) = (model.head().0.to_vec(), model.head().1);
    let h = 1e-3;
    let mut worst = 0.0f64;
    for i in 0..w0.len() {
        let mut loss = |d: f64| {
            let mut w = w0.clone();
            w[i] += d;
            model.set_head(&w, bias).unwrap();
            model.head_loss(&feats, &targets)
        };
        let fd = (loss(h) - loss(-h)) / (2.0 * h);
        let rel = (fd - g.weight[i]).abs() / fd.abs().max(g.weight[i].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    check(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "{} head weights, 8 samples, max relative error {worst:.1e} (< 1e-4)",
        w0.len()
    ))
}

fn partition_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for case in 0..50 {
        let n = rng.gen_range(10..=200);
        let n_d = rng.gen_range(0..=n);
        let mut records: Vec<SampleRecord> = (0..n)
            .map(|i| SampleRecord {
                sample_id: format!(
                    "s{:x}",
                    rng.gen::<u32>() ^ (i as u32).wrapping_mul(2_654_435_761)
                ),
                image_path: format!("{i}.png"),
                solute: "caffeine".into(),
                solvent: "water".into(),
                label: if i < n_d {
                    SolubilityLabel::Dissolved
                } else {
                    SolubilityLabel::Undissolved
                },
                fold: None,
                timestamp: None,
                gt_bbox: None,
            })
            .collect();
        records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        records.dedup_by(|a, b| a.sample_id == b.sample_id);
        let k = 5;
        let seed = rng.gen();
        let folds = assign_folds(&records, k, seed).map_err(|e| e.to_string())?;
        let fail = |m: &str| format!("case {case} (n={}): {m}", records.len());
        let ids: Vec<_> = records.iter().map(|r| r.sample_id.as_str()).collect();
        let keys: Vec<_> = folds.assignment.keys().map(String::as_str).collect();
        check(keys == ids, || fail("not exhaustive"))?;
        let mut members: Vec<String> = (0..k).flat_map(|f| folds.members(f)).collect();
        members.sort();
        check(
            members.len() == records.len()
                && members.iter().map(String::as_str).eq(ids.iter().copied()),
            || fail("folds overlap"),
        )?;
        let sizes = folds.fold_sizes();
        check(
            sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1,
            || fail("unbalanced"),
        )?;
        for label in SolubilityLabel::ALL {
            let total = records.iter().filter(|r| r.label == label).count() as f64;
            for f in 0..k {
                let c = records
                    .iter()
                    .filter(|r| r.label == label && folds.fold_of(&r.sample_id) == Some(f))
                    .count() as f64;
                check((c - total / k as f64).abs() <= 1.0, || {
                    fail("not stratified")
                })?;
            }
        }
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        check(assign_folds(&shuffled, k, seed).unwrap() == folds, || {
            fail("order dependent")
        })?;
    }
    Ok("50 manifests of 10-200 samples: disjoint, exhaustive, balanced, stratified, order independent".into())
}

/// The patience rule written out longhand.
fn brute_force_stop(h: &[f64], patience: usize, min_delta: f64) -> bool {
    if h.len() < patience + 1 {
        return false;
    }
    let mut improved_recently = false;
    for i in h.len() - patience..h.len() {
        let best_before = h[..i].iter().cloned().fold(f64::INFINITY, f64::min);
        if best_before - h[i] > min_delta {
            improved_recently = true;
        }
    }
    !improved_recently
}

fn early_stopping() -> Outcome {
    let d = TrainConfig::default();
    check(d.patience == 10 && d.min_delta == 0.01, || {
        format!("defaults {} / {}", d.patience, d.min_delta)
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut stops = 0;
    for case in 0..500 {
        let len = rng.gen_range(1..60);
        let mut v = rng.gen_range(0.5..3.0);
        let h: Vec<f64> = (0..len)
            .map(|_| {
                v = (v + rng.gen_range(-0.08..0.04f64)).max(0.0);
                v
            })
            .collect();
        let (patience, delta) = if case % 2 == 0 {
            (d.patience, d.min_delta)
        } else {
            (rng.gen_range(1..15), rng.gen_range(0.0..0.05))
        };
        let got = early_stop_check(&h, patience, delta);
        check(got == brute_force_stop(&h, patience, delta), || {
            format!("case {case}: {h:?}")
        })?;
        stops += got as usize;
    }
    Ok(format!("500 histories agree with the longhand rule ({stops} stop); defaults patience 10, min_delta 0.01"))
}

fn detector_fidelity() -> Outcome {
    let cfg = SynthConfig {
        n_samples: 100,
        seed: 4,
        background_modes: vec![BackgroundMode::Plain, BackgroundMode::Gradient],
        ..SynthConfig::default()
    };
    let detector = FallbackDetector::default();
    let mut good = 0;
    let mut samples = Vec::new();
    for i in 0..100 {
        let s = render_sample(&cfg, i).unwrap();
        let gt = s.record.gt_bbox.unwrap();
        good += detect_vial(&s.image, &detector).is_ok_and(|r| r.bbox.iou(&gt) >= 0.9) as usize;
        samples.push(s);
    }
    check(good >= 95, || format!("IoU >= 0.9 on {good}/100"))?;
    let mut shifts = 0;
    for s in samples
        .iter()
        .filter(|s| s.image.get(0, 0) == s.image.get(s.image.width() - 1, s.image.height() - 1))
        .take(10)
    {
        let b = s.record.gt_bbox.unwrap();
        let found = detect_vial(&s.image, &detector).unwrap().bbox;
        for (dx, dy) in [(-4i64, 3i64), (6, -2), (1, 1)] {
            let mut moved = ImageRgb::filled(s.image.width(), s.image.height(), s.image.get(0, 0));
            for y in b.y_min..b.y_max {
                for x in b.x_min..b.x_max {
                    moved.set(
                        (x as i64 + dx) as u32,
                        (y as i64 + dy) as u32,
                        s.image.get(x, y),
                    );
                }
            }
            let got = detect_vial(&moved, &detector).unwrap().bbox;
            let want: BoundingBox = found.translate(dx, dy).unwrap();
            check(got == want, || {
                format!("{}: shift ({dx},{dy}) gave {got:?}", s.record.sample_id)
            })?;
            shifts += 1;
        }
    }
    check(shifts >= 15, || format!("only {shifts} translation cases"))?;
    Ok(format!(
        "IoU >= 0.9 on {good}/100; {shifts} exact translations"
    ))
}

struct Scripted(Vec<SolubilityLabel>);

impl FrameClassifier for Scripted {
    fn classify(&self, id: &str, _: &ImageRgb) -> solis_core::Result<PredictionRecord> {
        let label = self.0[id.parse::<usize>().unwrap()];
        // Frame-specific confidences so permutations are observable.
        let margin = 0.5 + id.parse::<f64>().unwrap() * 0.25;
        let logits = if label == SolubilityLabel::Dissolved {
            [0.0, margin]
        } else {
            [margin, 0.0]
        };
        PredictionRecord::from_logits(id.to_string(), logits, None, None)
    }
}

fn decide(labels: &[SolubilityLabel], order: &[usize]) -> (SolubilityLabel, f64) {
    let img = ImageRgb::filled(1, 1, [0; 3]);
    let frames: Vec<_> = order
        .iter()
        .map(|&i| (i.to_string(), img.clone()))
        .collect();
    let d = screen_buffered(
        &frames,
        &Scripted(labels.to_vec()),
        &BufferPolicy::default(),
    )
    .unwrap();
    (d.label, d.confidence)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut v = rest.clone();
            v.insert(pos, n - 1);
            out.push(v);
        }
    }
    out
}

fn buffer_vote() -> Outcome {
    use SolubilityLabel::{Dissolved as D, Undissolved as U};
    let perms = permutations(5);
    let identity: Vec<usize> = (0..5).collect();
    for bits in 0u32..32 {
        let labels: Vec<_> = (0..5)
            .map(|i| if bits >> i & 1 == 1 { D } else { U })
            .collect();
        let d_votes = labels.iter().filter(|&&l| l == D).count();
        let oracle = if d_votes * 2 > 5 { D } else { U };
        let (label, conf) = decide(&labels, &identity);
        check(label == oracle, || format!("pattern {bits:05b}"))?;
        for perm in &perms {
            let (l2, c2) = decide(&labels, perm);
            check(l2 == label && (c2 - conf).abs() < 1e-12, || {
                format!("pattern {bits:05b} order {perm:?}")
            })?;
        }
        for i in (0..5).filter(|i| labels[*i] == U) {
            let mut up = labels.clone();
            up[i] = D;
            check(!(label == D && decide(&up, &identity).0 == U), || {
                format!("pattern {bits:05b} flip {i}")
            })?;
        }
    }
    Ok(format!(
        "32 patterns x {} orders match majority; monotone",
        perms.len()
    ))
}

fn strip_wall_time(text: &str) -> String {
    text.lines()
        .filter(|l| !l.contains("\"wall_time_s\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism(dir: &Path) -> Outcome {
    let data = dir.join("det");
    solis(&[
        "gen-synth",
        "--out",
        p(&data),
        "--n",
        "100",
        "--seed",
        "7",
        "--background",
        "plain,gradient",
    ])?;
    let config = dir.join("det_config.json");
    std::fs::write(&config, "{\"seed\": 1992, \"max_epochs\": 8}\n").unwrap();
    let mut reports = Vec::new();
    for r in ["det_a", "det_b"] {
        let run = dir.join(r);
        solis(&[
            "train",
            "--manifest",
            p(&data.join("manifest.jsonl")),
            "--config",
            p(&config),
            "--out",
            p(&run),
        ])?;
        reports.push(std::fs::read_to_string(run.join("cv_report.json")).unwrap());
    }
    let (a, b) = (strip_wall_time(&reports[0]), strip_wall_time(&reports[1]));
    check(a.contains("\"seed\": 1992"), || "seed not recorded".into())?;
    check(a == b, || "cv_report.json differs between runs".into())?;
    Ok(format!(
        "two 100-sample runs, seed 1992: identical reports ({} bytes without wall times)",
        a.len()
    ))
}

fn offline(dir: &Path) -> Outcome {
    let spec = lookup_backbone("resnet18").unwrap();
    let opts = BuildOptions {
        pretrained: true,
        weights_dir: Some(dir.join("empty_cache")),
        ..BuildOptions::default()
    };
    let r = build_classifier(&spec, TrainStrategy::FineTune, &opts);
    check(matches!(r, Err(Error::PretrainedUnavailable(_))), || {
        "pretrained request without cache did not fail cleanly".into()
    })?;
    Ok("all criteria ran with --no-download and no SOLIS_CACHE; missing weights fail with a clean error".into())
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("synthetic end-to-end", Box::new(|| synthetic_end_to_end(d))),
        ("metric oracles", Box::new(metric_oracle)),
        ("freeze invariant", Box::new(|| freeze_invariant(d))),
        ("gradient check", Box::new(|| gradient_check(d))),
        ("cv partition", Box::new(partition_property)),
        ("early stopping", Box::new(early_stopping)),
        ("detector fidelity", Box::new(detector_fidelity)),
        ("buffer vote", Box::new(buffer_vote)),
        ("determinism", Box::new(|| determinism(d))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or(e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        report(i + 1, name, &outcome);
        failed += outcome.is_err() as usize;
    }
    if filter.is_empty() {
        let outcome = if failed == 0 {
            offline(d)
        } else {
            Err(format!("{failed} criteria failed"))
        };
        report(10, "offline completeness", &outcome);
        failed += outcome.is_err() as usize;
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

fn report(n: usize, name: &str, outcome: &Outcome) {
    match outcome {
        Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
        Err(detail) => println!("FAIL {n:>2} {name}: {detail}"),
    }
}
