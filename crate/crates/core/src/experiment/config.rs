use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{default_k, DEFAULT_LAMBDA_CLF};
use crate::descriptor::GridSpec;
use crate::error::{Error, Result};
use crate::image::MAX_DIMENSION;
use crate::pyramid::PyramidConfig;
use crate::sparse::{LearnSchedule, DEFAULT_LAMBDA};

/// Everything needed to reproduce an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    /// Cut every manifest image into `[rows, cols]` tiles before use.
    pub tile: Option<[usize; 2]>,
    pub max_dimension: usize,
    pub grid: GridSpec,
    pub dict_size: usize,
    pub lambda: f64,
    pub schedule: LearnSchedule,
    /// Cap on the dictionary training pool; `None` uses every descriptor.
    pub pool_cap: Option<usize>,
    pub pyramid: PyramidConfig,
    /// Neighbour count; `None` picks 100 or 300 from `n_train`.
    pub k: Option<usize>,
    pub lambda_clf: f64,
    pub level_filtered: bool,
    pub n_train: usize,
    pub trials: usize,
    pub seed: u64,
    /// Learn one dictionary from every image instead of per-trial training images.
    pub shared_dictionary: bool,
    pub parallel_trials: bool,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            tile: None,
            max_dimension: MAX_DIMENSION,
            grid: GridSpec::default(),
            dict_size: 1500,
            lambda: DEFAULT_LAMBDA,
            schedule: LearnSchedule::default(),
            pool_cap: Some(200_000),
            pyramid: PyramidConfig::brodatz(),
            k: None,
            lambda_clf: DEFAULT_LAMBDA_CLF,
            level_filtered: false,
            n_train: 3,
            trials: 10,
            seed: 0,
            shared_dictionary: false,
            parallel_trials: false,
            out_dir: None,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn effective_k(&self) -> usize {
        self.k.unwrap_or_else(|| default_k(self.n_train))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::validation("trial count must be at least 1"));
        }
        if self.n_train == 0 {
            return Err(Error::validation("n_train must be at least 1"));
        }
        if self.dict_size == 0 {
            return Err(Error::validation("dictionary size must be positive"));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 || self.lambda_clf.is_nan() || self.lambda_clf <= 0.0 {
            return Err(Error::validation("penalties must be positive"));
        }
        if self.k == Some(0) {
            return Err(Error::validation("K must be at least 1"));
        }
        if let Some([r, c]) = self.tile {
            if r == 0 || c == 0 {
                return Err(Error::validation("tile grid must be at least 1x1"));
            }
        }
        self.grid.validate()?;
        self.pyramid.validate()?;
        if let Some(m) = &self.manifest {
            if !m.exists() {
                return Err(Error::io(
                    m,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = ExperimentConfig::default();
        assert_eq!(c.dict_size, 1500);
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.lambda_clf, 0.001);
        assert_eq!(c.effective_k(), 100);
        let c = ExperimentConfig {
            n_train: 10,
            ..c
        };
        assert_eq!(c.effective_k(), 300);
    }

    #[test]
    fn json_round_trip_with_partial_input() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"n_train": 2, "trials": 3}"#).unwrap();
        assert_eq!(c.n_train, 2);
        assert_eq!(c.dict_size, 1500);
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig { trials: 0, ..Default::default() }.validate().is_err());
        let missing = ExperimentConfig {
            manifest: Some("/no/such/manifest.jsonl".into()),
            ..Default::default()
        };
        assert!(matches!(missing.validate(), Err(Error::Io { .. })));
        ExperimentConfig::default().validate().unwrap();
    }
}
