//! Dataset inventory, subject-disjoint partitioning and image I/O.
//!
//! Manifest CSV schema (UTF-8, first line exactly):
//! `sample_id,file_path,label,pai_type,subject_id,device`
//! with `label` in {bonafide, attack} and empty strings for absent optional
//! fields.

pub mod imageio;
pub mod synth;

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::seq::SliceRandom;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Bonafide,
    Attack,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Bonafide => write!(f, "bonafide"),
            Label::Attack => write!(f, "attack"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub file_path: String,
    pub label: Label,
    pub pai_type: Option<String>,
    pub subject_id: Option<String>,
    pub device: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "sample_id,file_path,label,pai_type,subject_id,device";

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bonafide(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.label == Label::Bonafide)
    }

    pub fn attacks(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.label == Label::Attack)
    }

    /// Distinct PAI types present, in first-appearance order.
    pub fn pai_types(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for e in self.attacks() {
            if let Some(p) = &e.pai_type {
                if !seen.contains(p) {
                    seen.push(p.clone());
                }
            }
        }
        seen
    }

    fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(&e.sample_id) {
                return Err(Error::DuplicateId(e.sample_id.clone()));
            }
            if e.label == Label::Attack && e.pai_type.is_none() {
                return Err(Error::MissingField {
                    line: 0,
                    field: "pai_type".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.sample_id,
                e.file_path,
                e.label,
                e.pai_type.as_deref().unwrap_or(""),
                e.subject_id.as_deref().unwrap_or(""),
                e.device.as_deref().unwrap_or("")
            ));
        }
        out
    }
}

fn opt(s: &str) -> Option<String> {
    if s.is_empty() {
        None
    } else {
        Some(s.to_string())
    }
}

/// Parse a manifest CSV; duplicate ids and attack rows without a PAI type
/// are rejected with the offending line number.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == MANIFEST_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad header `{h}`; expected `{MANIFEST_HEADER}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }

    let mut entries = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        for (idx, name) in [(0, "sample_id"), (1, "file_path")] {
            if fields[idx].is_empty() {
                return Err(Error::MissingField {
                    line: lineno,
                    field: name.into(),
                });
            }
        }
        let label = match fields[2] {
            "bonafide" => Label::Bonafide,
            "attack" => Label::Attack,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("bad label `{other}`"),
                })
            }
        };
        let pai_type = opt(fields[3]);
        if label == Label::Attack && pai_type.is_none() {
            return Err(Error::MissingField {
                line: lineno,
                field: "pai_type".into(),
            });
        }
        if !ids.insert(fields[0].to_string()) {
            return Err(Error::DuplicateId(fields[0].to_string()));
        }
        entries.push(ManifestEntry {
            sample_id: fields[0].to_string(),
            file_path: fields[1].to_string(),
            label,
            pai_type,
            subject_id: opt(fields[4]),
            device: opt(fields[5]),
        });
    }
    Ok(DatasetManifest { entries })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    crate::harness::write_atomic(path, manifest.to_csv().as_bytes())
}

/// Split bona fide entries by subject so train and test subjects are
/// disjoint; all attack entries go to the test side. Subjects are shuffled
/// by seed and the train side takes the smallest subject prefix holding at
/// least `train_fraction` of the bona fide samples.
pub fn partition_by_subject(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut subjects = Vec::new();
    let mut n_bona = 0usize;
    for e in manifest.bonafide() {
        n_bona += 1;
        let s = e
            .subject_id
            .as_ref()
            .ok_or_else(|| Error::MissingSubject(e.sample_id.clone()))?;
        if !subjects.contains(s) {
            subjects.push(s.clone());
        }
    }

    let mut train_subjects: BTreeSet<String> = BTreeSet::new();
    if n_bona > 0 {
        let mut shuffled = subjects;
        shuffled.shuffle(&mut stream(seed));
        let target = (train_fraction * n_bona as f64).ceil() as usize;
        let mut covered = 0usize;
        for s in shuffled {
            if covered >= target {
                break;
            }
            covered += manifest
                .bonafide()
                .filter(|e| e.subject_id.as_deref() == Some(s.as_str()))
                .count();
            train_subjects.insert(s);
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        let to_train = e.label == Label::Bonafide
            && e.subject_id
                .as_ref()
                .map(|s| train_subjects.contains(s))
                .unwrap_or(false);
        if to_train {
            train.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    Ok((
        DatasetManifest { entries: train },
        DatasetManifest { entries: test },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: Label, pai: Option<&str>, subj: Option<&str>) -> ManifestEntry {
        ManifestEntry {
            sample_id: id.into(),
            file_path: format!("{id}.png"),
            label,
            pai_type: pai.map(String::from),
            subject_id: subj.map(String::from),
            device: None,
        }
    }

    #[test]
    fn header_only_is_empty_manifest() {
        let m = parse_manifest(&format!("{MANIFEST_HEADER}\n")).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn attack_without_pai_is_rejected_with_line() {
        let text = format!("{MANIFEST_HEADER}\ns1,a.png,attack,,subj,dev\n");
        match parse_manifest(&text) {
            Err(Error::MissingField { line, field }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "pai_type");
            }
            other => panic!("expected MissingField, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = format!(
            "{MANIFEST_HEADER}\ns1,a.png,bonafide,,u1,\ns1,b.png,bonafide,,u1,\n"
        );
        assert!(matches!(parse_manifest(&text), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn csv_roundtrip_preserves_fields() {
        let m = DatasetManifest::new(vec![
            entry("a", Label::Bonafide, None, Some("u1")),
            entry("b", Label::Attack, Some("blur"), None),
        ])
        .unwrap();
        let back = parse_manifest(&m.to_csv()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn partition_is_subject_disjoint() {
        let mut entries = Vec::new();
        for s in 0..2 {
            for i in 0..4 {
                entries.push(entry(
                    &format!("s{s}i{i}"),
                    Label::Bonafide,
                    None,
                    Some(&format!("u{s}")),
                ));
            }
        }
        let m = DatasetManifest::new(entries).unwrap();
        let (train, test) = partition_by_subject(&m, 0.5, 3).unwrap();
        let tr: BTreeSet<_> = train.entries.iter().filter_map(|e| e.subject_id.clone()).collect();
        let te: BTreeSet<_> = test.entries.iter().filter_map(|e| e.subject_id.clone()).collect();
        assert!(tr.is_disjoint(&te));
        assert_eq!(train.len() + test.len(), m.len());
        assert!(!train.is_empty() && !test.is_empty());
    }

    #[test]
    fn attacks_always_go_to_test() {
        let m = DatasetManifest::new(vec![
            entry("a1", Label::Attack, Some("blur"), None),
            entry("a2", Label::Attack, Some("moire"), None),
        ])
        .unwrap();
        let (train, test) = partition_by_subject(&m, 0.8, 0).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn large_partition_covers_fraction_and_stays_disjoint() {
        // 160 subjects x 5 samples; train side must hold >= 80% of samples.
        let mut entries = Vec::new();
        for s in 0..160 {
            for i in 0..5 {
                entries.push(entry(
                    &format!("s{s}_{i}"),
                    Label::Bonafide,
                    None,
                    Some(&format!("subj{s}")),
                ));
            }
        }
        let m = DatasetManifest::new(entries).unwrap();
        let (train, test) = partition_by_subject(&m, 0.8, 7).unwrap();
        assert!(train.len() >= (0.8 * m.len() as f64) as usize);
        let tr: BTreeSet<_> = train.entries.iter().filter_map(|e| e.subject_id.clone()).collect();
        let te: BTreeSet<_> = test.entries.iter().filter_map(|e| e.subject_id.clone()).collect();
        assert!(tr.is_disjoint(&te));
        // determinism
        let (train2, _) = partition_by_subject(&m, 0.8, 7).unwrap();
        assert_eq!(train, train2);
        // different seed, different membership (overwhelmingly likely)
        let (train3, _) = partition_by_subject(&m, 0.8, 8).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn missing_subject_is_an_error() {
        let m = DatasetManifest::new(vec![entry("x", Label::Bonafide, None, None)]).unwrap();
        assert!(matches!(
            partition_by_subject(&m, 0.5, 0),
            Err(Error::MissingSubject(_))
        ));
    }

    #[test]
    fn subject_disjointness_property_over_random_manifests() {
        // 100 random manifests with varying subject sizes.
        use rand::Rng;
        let mut rng = stream(99);
        for trial in 0..100 {
            let n_subj = rng.gen_range(2..20);
            let mut entries = Vec::new();
            let mut id = 0;
            for s in 0..n_subj {
                let k = rng.gen_range(1..10);
                for _ in 0..k {
                    entries.push(entry(
                        &format!("t{trial}_{id}"),
                        Label::Bonafide,
                        None,
                        Some(&format!("s{s}")),
                    ));
                    id += 1;
                }
            }
            let m = DatasetManifest::new(entries).unwrap();
            let frac = rng.gen_range(0.2..0.8);
            let (train, test) = partition_by_subject(&m, frac, trial as u64).unwrap();
            let tr: BTreeSet<_> =
                train.entries.iter().filter_map(|e| e.subject_id.clone()).collect();
            let te: BTreeSet<_> =
                test.entries.iter().filter_map(|e| e.subject_id.clone()).collect();
            assert!(tr.is_disjoint(&te), "trial {trial} not disjoint");
            assert_eq!(train.len() + test.len(), m.len());
        }
    }
}
