//! Dataset manifests and k-fold splits.
//!
//! ```toml
//! seed = 7
//! labeled = ["case000"]
//! unlabeled = ["case001"]
//! test = ["case002"]          # optional held-out cases
//!
//! [[cases]]
//! id = "case000"
//! volume = "case000_image.v3"  # relative to the manifest directory
//! label = "case000_label.v3"
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub volume: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub labeled: Vec<String>,
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
    pub cases: Vec<CaseEntry>,
    /// Directory that relative paths resolve against; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        let mut ids = HashSet::new();
        for c in &self.cases {
            if !ids.insert(c.id.as_str()) {
                return bad(format!("duplicate case id {:?}", c.id));
            }
        }
        if self.labeled.is_empty() {
            return bad("at least one labeled case is required".into());
        }
        let mut seen = HashSet::new();
        for (set, list) in [("labeled", &self.labeled), ("unlabeled", &self.unlabeled), ("test", &self.test)] {
            for id in list {
                if !ids.contains(id.as_str()) {
                    return bad(format!("{set} id {id:?} has no case entry"));
                }
                if !seen.insert(id.as_str()) {
                    return bad(format!("case {id:?} appears in more than one split (or twice)"));
                }
            }
        }
        for id in self.labeled.iter().chain(&self.test) {
            if self.case(id).and_then(|c| c.label.as_ref()).is_none() {
                return bad(format!("case {id:?} needs a label path"));
            }
        }
        Ok(())
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn volume_path(&self, id: &str) -> Result<PathBuf> {
        let c = self.case(id).ok_or_else(|| Error::Manifest(format!("unknown case {id:?}")))?;
        Ok(self.root.join(&c.volume))
    }

    pub fn label_path(&self, id: &str) -> Result<PathBuf> {
        let c = self.case(id).ok_or_else(|| Error::Manifest(format!("unknown case {id:?}")))?;
        let l = c
            .label
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("case {id:?} has no label")))?;
        Ok(self.root.join(l))
    }

    pub fn from_toml(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.root = root.into();
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, root).map_err(|e| match e {
            Error::Manifest(m) => Error::Manifest(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }
}

/// Shuffles case ids with `seed` and returns `(train, test)` for fold
/// `fold` of `k` contiguous chunks; earlier folds take the remainder.
pub fn kfold_split(manifest: &DatasetManifest, k: usize, fold: usize, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let n = manifest.cases.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be in 1..={n}")));
    }
    if fold >= k {
        return Err(Error::invalid(format!("fold index {fold} must be < k = {k}")));
    }
    let mut ids = manifest.ids();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / k;
    let extra = n % k;
    let start = fold * base + fold.min(extra);
    let len = base + usize::from(fold < extra);
    let test = ids[start..start + len].to_vec();
    let train = ids[..start].iter().chain(&ids[start + len..]).cloned().collect();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        let cases: Vec<CaseEntry> = (0..n)
            .map(|i| CaseEntry {
                id: format!("c{i}"),
                volume: format!("c{i}.v3").into(),
                label: Some(format!("c{i}_l.v3").into()),
            })
            .collect();
        DatasetManifest {
            seed: 1,
            labeled: vec!["c0".into()],
            unlabeled: (1..n).map(|i| format!("c{i}")).collect(),
            test: vec![],
            cases,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let m = manifest(4);
        let back = DatasetManifest::from_toml(&m.to_toml(), "").unwrap();
        assert_eq!(back, m);
        let mut overlap = m.clone();
        overlap.unlabeled.push("c0".into());
        assert!(overlap.validate().is_err());
        let mut unlabeled_label = m.clone();
        unlabeled_label.cases[0].label = None;
        assert!(unlabeled_label.validate().is_err());
        let mut none = m.clone();
        none.labeled.clear();
        assert!(none.validate().is_err());
        assert!(DatasetManifest::from_toml("seed = 1\nlabeled=[]\nunlabeled=[]\ncases=[]\nbogus=1", "").is_err());
    }

    #[test]
    fn folds_partition_cases() {
        let m = manifest(10);
        let mut all: Vec<String> = Vec::new();
        for f in 0..5 {
            let (train, test) = kfold_split(&m, 5, f, 3).unwrap();
            assert_eq!(test.len(), 2);
            assert_eq!(train.len(), 8);
            assert!(test.iter().all(|t| !train.contains(t)));
            all.extend(test);
        }
        all.sort();
        let mut ids = m.ids();
        ids.sort();
        assert_eq!(all, ids);
        assert_eq!(kfold_split(&m, 5, 2, 3).unwrap(), kfold_split(&m, 5, 2, 3).unwrap());
        assert!(kfold_split(&m, 11, 0, 3).is_err());
        assert!(kfold_split(&m, 5, 5, 3).is_err());
    }

    #[test]
    fn leave_one_out() {
        let m = manifest(7);
        for f in 0..7 {
            let (train, test) = kfold_split(&m, 7, f, 0).unwrap();
            assert_eq!((train.len(), test.len()), (6, 1));
        }
        let (_, t) = kfold_split(&manifest(7), 3, 0, 0).unwrap();
        assert_eq!(t.len(), 3);
    }
}
