//! Sample manifests, fold assignment, and the synthetic vial generator.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::SolubilityLabel;
use crate::rng;
use crate::segmentation::BoundingBox;

pub use synth::{
    generate_synthetic, render_background, render_sample, render_vial, BackgroundMode,
    BackgroundStyle, SynthConfig, SynthSample, VialGeometry, VialStyle,
};

/// One labeled image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub solute: String,
    pub solvent: String,
    pub label: SolubilityLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bbox: Option<BoundingBox>,
}

#[derive(Deserialize)]
struct RawRecord {
    sample_id: String,
    image_path: String,
    solute: String,
    solvent: String,
    label: String,
    #[serde(default)]
    fold: Option<usize>,
    #[serde(default)]
    timestamp: Option<String>,
    #[serde(default)]
    gt_bbox: Option<BoundingBox>,
}

/// A loaded manifest. `warnings` lists records whose image file is absent.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn load_image(&self, record: &SampleRecord) -> Result<ImageRgb> {
        ImageRgb::load_png(&self.image_path(record))
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }
}

fn check_relative(path: &str) -> std::result::Result<(), String> {
    if path.is_empty() {
        return Err("empty image_path".into());
    }
    for c in Path::new(path).components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            _ => {
                return Err(format!(
                    "image_path `{path}` must stay under the manifest root"
                ))
            }
        }
    }
    Ok(())
}

/// Parses JSON-Lines manifest text. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = raw.label.parse().map_err(|label| Error::UnknownLabel {
            line: line_no,
            label,
        })?;
        check_relative(&raw.image_path).map_err(|message| Error::Manifest {
            line: line_no,
            message,
        })?;
        if !seen.insert(raw.sample_id.clone()) {
            return Err(Error::DuplicateId(raw.sample_id));
        }
        records.push(SampleRecord {
            sample_id: raw.sample_id,
            image_path: raw.image_path,
            solute: raw.solute,
            solvent: raw.solvent,
            label,
            fold: raw.fold,
            timestamp: raw.timestamp,
            gt_bbox: raw.gt_bbox,
        });
    }
    Ok(records)
}

/// Reads a manifest file. Missing images are collected as warnings, or
/// rejected when `strict`.
pub fn load_manifest(path: &Path, strict: bool) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_manifest(&text)?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut warnings = Vec::new();
    for r in &records {
        let image = root.join(&r.image_path);
        if !image.is_file() {
            if strict {
                return Err(Error::MissingImage(image));
            }
            warnings.push(format!(
                "{}: image file not found: {}",
                r.sample_id,
                image.display()
            ));
        }
    }
    Ok(Manifest {
        root,
        records,
        warnings,
    })
}

pub fn manifest_to_string(records: &[SampleRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    fs::write(path, manifest_to_string(records)?).map_err(|e| Error::io(path, e))
}

/// Sample-to-fold map. Iteration order is by sample id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.assignment.get(sample_id).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified, input-order independent k-fold assignment.
///
/// Ids are sorted and shuffled (Fisher-Yates, seeded), then split into the
/// undissolved and dissolved strata keeping shuffled order. The strata are
/// concatenated and dealt round-robin, so the n-th sample of the sequence
/// lands in fold `n % k`. Fold sizes differ by at most one and each
/// fold's per-label count is within one of proportional.
pub fn assign_folds(records: &[SampleRecord], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!(
            "k_folds must be at least 2, got {k}"
        )));
    }
    if records.len() < k {
        return Err(Error::TooFewSamples(format!(
            "{} samples cannot fill {k} folds",
            records.len()
        )));
    }
    let mut labels = BTreeMap::new();
    for r in records {
        if labels.insert(r.sample_id.as_str(), r.label).is_some() {
            return Err(Error::DuplicateId(r.sample_id.clone()));
        }
    }
    let mut ids: Vec<&str> = labels.keys().copied().collect();
    ids.shuffle(&mut rng::stream(seed, "folds", 0));

    let mut assignment = BTreeMap::new();
    let labels = &labels;
    let ordered = SolubilityLabel::ALL
        .iter()
        .flat_map(|&label| ids.iter().filter(move |id| labels[*id] == label));
    for (pos, id) in ordered.enumerate() {
        assignment.insert(id.to_string(), pos % k);
    }
    Ok(FoldAssignment {
        k,
        seed,
        assignment,
    })
}

/// Seeded holdout split; the validation part has `round(fraction * n)`
/// ids, at least one, and the training part keeps at least one.
pub fn train_val_split(
    ids: &[String],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    if ids.len() < 2 {
        return Err(Error::TooFewSamples(format!(
            "{} ids cannot be split into train and validation",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != ids.len() {
        return Err(Error::Config("duplicate ids in train/val split".into()));
    }
    sorted.shuffle(&mut rng::stream(seed, "val_split", 0));
    let n = sorted.len();
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let train = sorted.split_off(n_val);
    Ok((train, sorted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SolubilityLabel::*;

    fn record(id: &str, label: SolubilityLabel) -> SampleRecord {
        SampleRecord {
            sample_id: id.into(),
            image_path: format!("images/{id}.png"),
            solute: "caffeine".into(),
            solvent: "water".into(),
            label,
            fold: None,
            timestamp: None,
            gt_bbox: None,
        }
    }

    fn line(id: &str, label: &str) -> String {
        format!(
            r#"{{"sample_id":"{id}","image_path":"images/{id}.png","solute":"benzimidazole","solvent":"acetone","label":"{label}"}}"#
        )
    }

    #[test]
    fn parse_examples() {
        assert!(parse_manifest("").unwrap().is_empty());
        let text = format!("{}\n{}\n", line("b", "dissolved"), line("a", "undissolved"));
        let recs = parse_manifest(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].sample_id, "b");
        assert_eq!(recs[1].label, Undissolved);

        let dup = format!(
            "{}\n{}\n",
            line("v001", "dissolved"),
            line("v001", "dissolved")
        );
        let err = parse_manifest(&dup).unwrap_err();
        assert!(err.to_string().contains("v001"), "{err}");

        let bad = format!("{}\n\n{}\n", line("a", "dissolved"), line("b", "cloudy"));
        match parse_manifest(&bad).unwrap_err() {
            Error::UnknownLabel { line, label } => {
                assert_eq!(line, 3);
                assert_eq!(label, "cloudy");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn parse_optional_fields() {
        let text = r#"{"sample_id":"s","image_path":"x.png","solute":"caffeine","solvent":"water","label":"dissolved","fold":3,"timestamp":"2022-03-01T10:00:00Z","gt_bbox":[1,2,30,40]}"#;
        let r = &parse_manifest(text).unwrap()[0];
        assert_eq!(r.fold, Some(3));
        assert_eq!(r.gt_bbox, Some(BoundingBox::new(1, 2, 30, 40).unwrap()));
        let back = manifest_to_string(std::slice::from_ref(r)).unwrap();
        assert_eq!(parse_manifest(&back).unwrap()[0], *r);
    }

    #[test]
    fn rejects_escaping_paths_and_bad_boxes() {
        for p in ["../x.png", "/etc/passwd", "a/../../b.png", ""] {
            let text = format!(
                r#"{{"sample_id":"s","image_path":"{p}","solute":"a","solvent":"b","label":"dissolved"}}"#
            );
            assert!(
                matches!(parse_manifest(&text), Err(Error::Manifest { line: 1, .. })),
                "{p}"
            );
        }
        let text = r#"{"sample_id":"s","image_path":"x.png","solute":"a","solvent":"b","label":"dissolved","gt_bbox":[5,5,5,9]}"#;
        assert!(parse_manifest(text).is_err());
        assert!(parse_manifest("{not json").is_err());
    }

    #[test]
    fn load_reports_missing_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(&path, format!("{}\n", line("a", "dissolved"))).unwrap();
        let m = load_manifest(&path, false).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.warnings.len(), 1);
        assert!(matches!(
            load_manifest(&path, true),
            Err(Error::MissingImage(_))
        ));

        fs::create_dir(dir.path().join("images")).unwrap();
        ImageRgb::filled(4, 4, [1, 2, 3])
            .save_png(&dir.path().join("images/a.png"))
            .unwrap();
        let m = load_manifest(&path, true).unwrap();
        assert!(m.warnings.is_empty());
        assert_eq!(m.load_image(&m.records[0]).unwrap().get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn fold_examples() {
        let recs: Vec<_> = (0..10)
            .map(|i| {
                record(
                    &format!("s{i}"),
                    if i < 5 { Undissolved } else { Dissolved },
                )
            })
            .collect();
        let fa = assign_folds(&recs, 5, 1992).unwrap();
        for f in 0..5 {
            let members = fa.members(f);
            assert_eq!(members.len(), 2);
            let n_d = members
                .iter()
                .filter(|id| {
                    recs.iter()
                        .any(|r| &r.sample_id == *id && r.label == Dissolved)
                })
                .count();
            assert_eq!(n_d, 1);
        }

        let mut reversed = recs.clone();
        reversed.reverse();
        assert_eq!(assign_folds(&reversed, 5, 1992).unwrap(), fa);

        let recs11: Vec<_> = (0..11)
            .map(|i| record(&format!("s{i}"), Dissolved))
            .collect();
        let mut sizes = assign_folds(&recs11, 5, 3).unwrap().fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);

        assert!(assign_folds(&recs[..4], 5, 0).is_err());
        assert!(assign_folds(&recs, 1, 0).is_err());
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let (train, val) = train_val_split(&ids, 0.2, 5).unwrap();
        assert_eq!((train.len(), val.len()), (8, 2));
        assert_eq!(train_val_split(&ids, 0.2, 5).unwrap(), (train, val));
        let (train, val) = train_val_split(&ids[..2], 0.01, 5).unwrap();
        assert_eq!((train.len(), val.len()), (1, 1));
        assert!(train_val_split(&ids[..1], 0.2, 5).is_err());
        assert!(train_val_split(&ids, 0.0, 5).is_err());
        assert!(train_val_split(&ids, 1.0, 5).is_err());
    }

    fn manifest_strategy() -> impl Strategy<Value = Vec<SampleRecord>> {
        proptest::collection::vec(any::<bool>(), 10..200).prop_map(|labels| {
            labels
                .into_iter()
                .enumerate()
                .map(|(i, d)| record(&format!("v{i:03}"), if d { Dissolved } else { Undissolved }))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn folds_partition_and_stratify(recs in manifest_strategy(), k in 2usize..=10, seed in any::<u64>()) {
            prop_assume!(recs.len() >= k);
            let fa = assign_folds(&recs, k, seed).unwrap();
            prop_assert_eq!(fa.assignment.len(), recs.len());
            let sizes = fa.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let n_d = recs.iter().filter(|r| r.label == Dissolved).count() as f64;
            let n = recs.len() as f64;
            for (f, &size) in sizes.iter().enumerate() {
                let d = recs.iter().filter(|r| r.label == Dissolved && fa.fold_of(&r.sample_id) == Some(f)).count() as f64;
                prop_assert!((d - size as f64 * n_d / n).abs() <= 1.0);
            }
        }

        #[test]
        fn split_is_disjoint_and_exhaustive(n in 2usize..100, frac in 0.01f64..0.99, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
            let (train, val) = train_val_split(&ids, frac, seed).unwrap();
            prop_assert!(!val.is_empty() && !train.is_empty());
            let mut all: Vec<_> = train.iter().chain(&val).cloned().collect();
            all.sort();
            let mut expect = ids.clone();
            expect.sort();
            prop_assert_eq!(all, expect);
        }
    }
}
