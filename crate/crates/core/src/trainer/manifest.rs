//! Dataset manifests and the two-fold split.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_feature_map, FeatureMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fold {
    A,
    B,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fold::A => "A",
            Fold::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Feature-map path. Relative paths in a manifest file are resolved
    /// against the file's directory when it is loaded.
    pub path: PathBuf,
    pub label: usize,
    pub fold: Option<Fold>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    path: String,
    label: String,
    fold: String,
}

/// A labelled list of feature maps.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Checks that ids are unique and labels binary.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Schema(format!("duplicate id {:?} in manifest", e.id)));
            }
            if e.label > 1 {
                return Err(Error::Schema(format!(
                    "label {} of {:?} is not 0 or 1",
                    e.label, e.id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Reads a CSV with header `id,path,label,fold`. The fold may be blank.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let mut entries = Vec::new();
        for (i, row) in reader.deserialize::<Row>().enumerate() {
            let row = row?;
            let line = i + 2;
            let label = match row.label.trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Schema(format!(
                        "{}:{line}: label {other:?} is not 0 or 1",
                        path.display()
                    )))
                }
            };
            let fold = match row.fold.trim() {
                "" => None,
                "A" | "a" => Some(Fold::A),
                "B" | "b" => Some(Fold::B),
                other => {
                    return Err(Error::Schema(format!(
                        "{}:{line}: fold {other:?} is not A, B or blank",
                        path.display()
                    )))
                }
            };
            let p = PathBuf::from(row.path.trim());
            entries.push(ManifestEntry {
                id: row.id,
                path: if p.is_relative() { base.join(p) } else { p },
                label,
                fold,
            });
        }
        Self::new(entries)
    }

    /// Writes the manifest; paths are written as stored.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for e in &self.entries {
            w.serialize(Row {
                id: e.id.clone(),
                path: e.path.to_string_lossy().into_owned(),
                label: e.label.to_string(),
                fold: e.fold.map(|f| f.to_string()).unwrap_or_default(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// The fold assignment stored in the manifest, if every entry has one.
    pub fn stored_folds(&self) -> Option<TwoFold> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            match e.fold? {
                Fold::A => a.push(i),
                Fold::B => b.push(i),
            }
        }
        Some(TwoFold {
            a,
            b,
            stratified: true,
        })
    }

    /// Reads the feature maps of the given entries.
    pub fn load_samples(&self, indices: &[usize]) -> Result<Vec<Sample>> {
        indices
            .iter()
            .map(|&i| {
                let e = self.entries.get(i).ok_or_else(|| {
                    Error::Argument(format!("entry {i} out of range for {} entries", self.len()))
                })?;
                Ok(Sample {
                    id: e.id.clone(),
                    map: read_feature_map(&e.path)?,
                    label: e.label,
                })
            })
            .collect()
    }
}

/// A feature map with its label, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub map: FeatureMap,
    pub label: usize,
}

/// Indices into a manifest for the two halves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoFold {
    pub a: Vec<usize>,
    pub b: Vec<usize>,
    /// False when only one class is present and the split fell back to a
    /// plain random halving.
    pub stratified: bool,
}

/// Splits `labels` into two halves of equal size (within one), keeping the
/// class proportions equal (within one per class).
///
/// Indices are shuffled with `seed`, stably grouped by label, and dealt out
/// alternately to A and B.
pub fn split_two_fold(labels: &[usize], seed: u64) -> Result<TwoFold> {
    if labels.len() < 2 {
        return Err(Error::Argument(format!(
            "a two-fold split needs at least 2 entries, got {}",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let first = labels[0];
    let stratified = labels.iter().any(|&l| l != first);
    order.sort_by_key(|&i| labels[i]);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (k, i) in order.into_iter().enumerate() {
        if k % 2 == 0 { &mut a } else { &mut b }.push(i);
    }
    Ok(TwoFold { a, b, stratified })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_108_splits_27_per_class() {
        let labels: Vec<usize> = (0..108).map(|i| i % 2).collect();
        let f = split_two_fold(&labels, 3).unwrap();
        assert!(f.stratified);
        for half in [&f.a, &f.b] {
            assert_eq!(half.len(), 54);
            assert_eq!(half.iter().filter(|&&i| labels[i] == 1).count(), 27);
        }
    }

    #[test]
    fn three_entries_split_two_one() {
        let f = split_two_fold(&[0, 1, 1], 9).unwrap();
        let mut sizes = [f.a.len(), f.b.len()];
        sizes.sort();
        assert_eq!(sizes, [1, 2]);
    }

    #[test]
    fn single_class_falls_back() {
        let f = split_two_fold(&[1; 7], 0).unwrap();
        assert!(!f.stratified);
        assert_eq!(f.a.len() + f.b.len(), 7);
    }

    #[test]
    fn one_entry_is_rejected() {
        assert!(matches!(split_two_fold(&[0], 0), Err(Error::Argument(_))));
    }

    #[test]
    fn seeded_split_is_deterministic() {
        let labels: Vec<usize> = (0..31).map(|i| (i * 7 % 3 == 0) as usize).collect();
        assert_eq!(split_two_fold(&labels, 5).unwrap(), split_two_fold(&labels, 5).unwrap());
        assert_ne!(split_two_fold(&labels, 5).unwrap(), split_two_fold(&labels, 6).unwrap());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let e = ManifestEntry {
            id: "x".into(),
            path: "x.mfcm".into(),
            label: 0,
            fold: None,
        };
        assert!(matches!(
            DatasetManifest::new(vec![e.clone(), e]),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn csv_round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(vec![
            ManifestEntry {
                id: "a".into(),
                path: "maps/a.mfcm".into(),
                label: 1,
                fold: Some(Fold::B),
            },
            ManifestEntry {
                id: "b".into(),
                path: "b.mfcm".into(),
                label: 0,
                fold: None,
            },
        ])
        .unwrap();
        let path = dir.path().join("m.csv");
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,path,label,fold\n"));
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.entries()[0].path, dir.path().join("maps/a.mfcm"));
        assert_eq!(back.entries()[0].fold, Some(Fold::B));
        assert_eq!(back.entries()[1].fold, None);
        assert!(back.stored_folds().is_none());
    }

    #[test]
    fn bad_label_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "id,path,label,fold\na,a.mfcm,0,\nb,b.mfcm,2,\n").unwrap();
        let err = DatasetManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }
}
