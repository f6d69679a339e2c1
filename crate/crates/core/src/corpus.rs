//! Dataset manifests and seeded train/test splits.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator behind every seeded draw in the toolkit (splits, subsampling,
/// dictionary initialization, synthetic textures).
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
    pub class: usize,
}

/// Labelled image list. Class indices follow sorted label order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    entries: Vec<ManifestEntry>,
    labels: Vec<String>,
}

#[derive(Deserialize, Serialize)]
struct ManifestLine {
    path: PathBuf,
    label: String,
}

impl DatasetManifest {
    pub fn from_entries<I, P, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (P, S)>,
        P: Into<PathBuf>,
        S: Into<String>,
    {
        let raw: Vec<(PathBuf, String)> = items
            .into_iter()
            .map(|(p, s)| (p.into(), s.into()))
            .collect();
        if raw.is_empty() {
            return Err(Error::validation("manifest has no entries"));
        }
        let mut seen = HashSet::new();
        for (p, _) in &raw {
            if !seen.insert(p.clone()) {
                return Err(Error::validation(format!(
                    "duplicate manifest path {}",
                    p.display()
                )));
            }
        }
        let labels: Vec<String> = raw
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let entries = raw
            .into_iter()
            .map(|(path, label)| {
                let class = labels.binary_search(&label).expect("label collected above");
                ManifestEntry { path, label, class }
            })
            .collect();
        Ok(Self { entries, labels })
    }

    /// Reads a JSON-lines manifest. Relative paths resolve against the
    /// manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut items = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| {
                Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            let p = if parsed.path.is_absolute() {
                parsed.path
            } else {
                base.join(parsed.path)
            };
            items.push((p, parsed.label));
        }
        Self::from_entries(items)
    }

    /// Writes the manifest as JSON lines, with paths relative to `base` when possible.
    pub fn save(&self, path: impl AsRef<Path>, base: Option<&Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        for e in &self.entries {
            let p = match base {
                Some(b) => e.path.strip_prefix(b).unwrap_or(&e.path).to_path_buf(),
                None => e.path.clone(),
            };
            let line = serde_json::to_string(&ManifestLine {
                path: p,
                label: e.label.clone(),
            })
            .expect("manifest line serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.labels.len()];
        for (i, e) in self.entries.iter().enumerate() {
            groups[e.class].push(i);
        }
        groups
    }
}

/// A train/test partition of a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub n_train: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SplitPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("split plan serializes")
    }
}

/// Draws `n_train` training entries per class uniformly at random. Classes
/// with at most `n_train` entries keep one entry for testing and record a warning.
pub fn make_split(manifest: &DatasetManifest, n_train: usize, seed: u64) -> Result<SplitPlan> {
    if n_train == 0 {
        return Err(Error::validation("n_train must be at least 1"));
    }
    let mut rng = seeded_rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut warnings = Vec::new();
    for (class, members) in manifest.indices_by_class().into_iter().enumerate() {
        let take = if members.len() > n_train {
            n_train
        } else {
            if members.len() < 2 {
                return Err(Error::validation(format!(
                    "class '{}' has {} entries; cannot hold out a test sample",
                    manifest.labels[class],
                    members.len()
                )));
            }
            let msg = format!(
                "class '{}' has only {} entries; using {} for training",
                manifest.labels[class],
                members.len(),
                members.len() - 1
            );
            log::warn!("{msg}");
            warnings.push(msg);
            members.len() - 1
        };
        let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, members.len(), take)
            .into_iter()
            .collect();
        for (k, idx) in members.into_iter().enumerate() {
            if chosen.contains(&k) {
                train.push(idx);
            } else {
                test.push(idx);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        seed,
        n_train,
        train,
        test,
        warnings,
    })
}
