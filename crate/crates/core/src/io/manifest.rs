//! Dataset manifests: image/mask pairs grouped by patient, with a
//! patient-level train/test split. Paths are stored relative to the manifest
//! file's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{load_sample, Sample};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_TEST_FRACTION: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub name: String,
    pub spatial_rank: usize,
    pub image_channels: usize,
    /// Logit channels: 1 for binary tasks, otherwise one per class.
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub task: TaskMeta,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(task: TaskMeta, root: impl Into<PathBuf>) -> Self {
        Self {
            task,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.patient.as_str()).collect()
    }

    /// Sends `round(fraction * patients)` whole patients to the test split,
    /// keeping at least one training patient when there are two or more.
    pub fn assign_splits(&mut self, test_fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(invalid(format!("test fraction {test_fraction} outside [0, 1]")));
        }
        let mut patients: Vec<String> = self.patients().into_iter().map(str::to_owned).collect();
        patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_test = (test_fraction * patients.len() as f64).round() as usize;
        if patients.len() >= 2 {
            n_test = n_test.min(patients.len() - 1);
        }
        let test: BTreeSet<&String> = patients[..n_test].iter().collect();
        for e in &mut self.entries {
            e.split = if test.contains(&e.patient) { Split::Test } else { Split::Train };
        }
        Ok(())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn load_samples(&self, split: Split) -> Result<Vec<Sample>> {
        self.entries_in(split)
            .map(|e| load_sample(self.resolve(&e.image), self.resolve(&e.mask)))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut m: Self = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Writes `manifest.json` into the root directory and returns its path.
    pub fn save(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.root)?;
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}
