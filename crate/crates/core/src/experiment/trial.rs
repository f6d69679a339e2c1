use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::Serialize;

use super::cache::{KeyBuilder, StageCache};
use super::config::ExperimentConfig;
use super::synth::SyntheticSet;
use crate::classifier::{classify_batch, FeaturePond};
use crate::corpus::{make_split, seeded_rng, DatasetManifest};
use crate::descriptor::{extract_all_with, DenseDescriptorSet};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{load_image, tile_image, GrayImage};
use crate::pyramid::{build_layout, describe_image, ImageDescriptor, PyramidLayout};
use crate::sparse::{learn_dictionary, sample_pool, CodeMatrix, Dictionary, Encoder};

/// Decoded images aligned with a manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    manifest: DatasetManifest,
    images: Vec<GrayImage>,
}

impl Corpus {
    pub fn new(manifest: DatasetManifest, images: Vec<GrayImage>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::validation(format!(
                "{} manifest entries for {} images",
                manifest.len(),
                images.len()
            )));
        }
        Ok(Self { manifest, images })
    }

    /// Uses `label/NNN` identifiers in place of file paths.
    pub fn from_synthetic(set: &SyntheticSet) -> Result<Self> {
        let mut counters = vec![0usize; set.labels.len()];
        let mut ids = Vec::with_capacity(set.images.len());
        for (class, _) in &set.images {
            let label = &set.labels[*class];
            ids.push((format!("{label}/{:03}", counters[*class]), label.clone()));
            counters[*class] += 1;
        }
        let manifest = DatasetManifest::from_entries(ids)?;
        Self::new(manifest, set.images.iter().map(|(_, img)| img.clone()).collect())
    }

    /// Loads every manifest image, downscales it to `max_dimension`, and
    /// optionally cuts it into `[rows, cols]` tiles that inherit its label.
    pub fn load(manifest: &DatasetManifest, tile: Option<[usize; 2]>, max_dimension: usize, exec: Exec) -> Result<Self> {
        let entries = manifest.entries();
        let decoded = exec.try_map(entries.len(), |i| {
            load_image(&entries[i].path).map(|img| img.limit_dimension(max_dimension))
        })?;
        let Some([rows, cols]) = tile else {
            return Self::new(manifest.clone(), decoded);
        };
        let mut items = Vec::new();
        let mut images = Vec::new();
        for (entry, img) in entries.iter().zip(&decoded) {
            for (t, piece) in tile_image(img, rows, cols)?.into_iter().enumerate() {
                let mut id = entry.path.clone().into_os_string();
                id.push(format!("#tile{t}"));
                items.push((id, entry.label.clone()));
                images.push(piece);
            }
        }
        Self::new(DatasetManifest::from_entries(items)?, images)
    }

    pub fn from_config(config: &ExperimentConfig, exec: Exec) -> Result<Self> {
        let path = config
            .manifest
            .as_ref()
            .ok_or_else(|| Error::validation("no manifest configured"))?;
        let manifest = DatasetManifest::load(path)?;
        Self::load(&manifest, config.tile, config.max_dimension, exec)
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn images(&self) -> &[GrayImage] {
        &self.images
    }

    pub fn labels(&self) -> &[String] {
        self.manifest.labels()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn id(&self, i: usize) -> String {
        self.manifest.entries()[i].path.display().to_string()
    }
}

/// Classification outcome for one test image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImagePrediction {
    pub trial: usize,
    pub image: String,
    pub truth: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

/// Results of one or more trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub labels: Vec<String>,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// Summed over trials; rows are true classes, columns predictions.
    pub counts: Vec<Vec<usize>>,
    pub predictions: Vec<ImagePrediction>,
    pub warnings: Vec<String>,
}

impl TrialResult {
    pub fn trials(&self) -> usize {
        self.accuracies.len()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation across trials; zero for a single trial.
    pub fn std_accuracy(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean_accuracy();
        (self.accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }

    /// Row-normalized confusion; classes never tested get an all-zero row.
    pub fn confusion(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                    .collect()
            })
            .collect()
    }

    /// Concatenates trials in order, renumbering their trial indices.
    pub fn merge(parts: Vec<TrialResult>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let mut acc = iter
            .next()
            .ok_or_else(|| Error::validation("no trial results to merge"))?;
        for part in iter {
            if part.labels != acc.labels {
                return Err(Error::validation("cannot merge trials over different label sets"));
            }
            let offset = acc.trials();
            acc.seeds.extend(part.seeds);
            acc.accuracies.extend(part.accuracies);
            for (row, other) in acc.counts.iter_mut().zip(part.counts) {
                for (c, o) in row.iter_mut().zip(other) {
                    *c += o;
                }
            }
            acc.predictions.extend(part.predictions.into_iter().map(|mut p| {
                p.trial += offset;
                p
            }));
            for w in part.warnings {
                if !acc.warnings.contains(&w) {
                    acc.warnings.push(w);
                }
            }
        }
        Ok(acc)
    }
}

/// Trial-independent state: descriptors, layouts and an optional shared dictionary.
pub struct Prepared<'a> {
    corpus: &'a Corpus,
    config: &'a ExperimentConfig,
    cache: &'a StageCache,
    exec: Exec,
    descriptors: Vec<DenseDescriptorSet>,
    descriptor_keys: Vec<String>,
    layouts: BTreeMap<(usize, usize), PyramidLayout>,
    shared: Option<Dictionary>,
}

impl<'a> Prepared<'a> {
    pub fn new(corpus: &'a Corpus, config: &'a ExperimentConfig, cache: &'a StageCache, exec: Exec) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::validation("corpus is empty"));
        }
        let sizes: Vec<usize> = corpus.manifest.indices_by_class().iter().map(Vec::len).collect();
        if sizes.iter().all(|&s| s <= config.n_train) {
            return Err(Error::validation(format!(
                "n_train = {} leaves no test images (largest class has {})",
                config.n_train,
                sizes.iter().max().copied().unwrap_or(0)
            )));
        }

        let mut layouts = BTreeMap::new();
        for img in &corpus.images {
            if let std::collections::btree_map::Entry::Vacant(slot) = layouts.entry(img.dims()) {
                slot.insert(build_layout(img.dims(), &config.pyramid, &config.grid).map_err(|e| e.in_stage("pool"))?);
            }
        }

        let grid_json = serde_json::to_vec(&config.grid).expect("grid serializes");
        let descriptor_keys: Vec<String> = exec.map(corpus.len(), |i| {
            let img = &corpus.images[i];
            KeyBuilder::new("extract")
                .part(&(img.width() as u64).to_le_bytes())
                .part(&(img.height() as u64).to_le_bytes())
                .f64s(img.pixels())
                .part(&grid_json)
                .finish()
        });
        let descriptors = exec
            .try_map(corpus.len(), |i| {
                cache.get_or_compute(
                    "descriptors",
                    &descriptor_keys[i],
                    DenseDescriptorSet::to_bytes,
                    DenseDescriptorSet::from_bytes,
                    || extract_all_with(&corpus.images[i], &config.grid, Exec::Sequential),
                )
            })
            .map_err(|e| e.in_stage("extract"))?;

        let mut prepared = Self {
            corpus,
            config,
            cache,
            exec,
            descriptors,
            descriptor_keys,
            layouts,
            shared: None,
        };
        if config.shared_dictionary {
            let all: Vec<usize> = (0..corpus.len()).collect();
            prepared.shared = Some(prepared.dictionary(&all, config.seed)?);
        }
        Ok(prepared)
    }

    pub fn descriptors(&self) -> &[DenseDescriptorSet] {
        &self.descriptors
    }

    fn dictionary(&self, images: &[usize], seed: u64) -> Result<Dictionary> {
        let cfg = self.config;
        let mut key = KeyBuilder::new("learn");
        for &i in images {
            key = key.part(self.descriptor_keys[i].as_bytes());
        }
        let key = key
            .part(&(cfg.dict_size as u64).to_le_bytes())
            .f64s(&[cfg.lambda])
            .part(&serde_json::to_vec(&cfg.schedule).expect("schedule serializes"))
            .part(&serde_json::to_vec(&cfg.pool_cap).expect("cap serializes"))
            .part(&seed.to_le_bytes())
            .finish();
        self.cache
            .get_or_compute(
                "dictionaries",
                &key,
                |d: &Dictionary| d.to_bytes(cfg.lambda),
                |b| Dictionary::from_bytes(b).map(|(d, _)| d),
                || {
                    let mut rng = seeded_rng(seed);
                    let sets: Vec<&DenseDescriptorSet> = images.iter().map(|&i| &self.descriptors[i]).collect();
                    let pool = sample_pool(&sets, cfg.pool_cap, rng.next_u64())?;
                    let learned =
                        learn_dictionary(&pool, cfg.dict_size, cfg.lambda, &cfg.schedule, rng.next_u64(), self.exec)?;
                    log::info!(
                        "learned {} atoms from {} descriptors in {} alternations",
                        cfg.dict_size,
                        pool.ncols(),
                        learned.alternations
                    );
                    Ok(learned.dictionary)
                },
            )
            .map_err(|e| e.in_stage("learn"))
    }

    fn encode_all(&self, dict: &Dictionary) -> Result<Vec<CodeMatrix>> {
        let cfg = self.config;
        let encoder = Encoder::with_options(dict.clone(), cfg.lambda, cfg.schedule.coding)?;
        let dict_key = KeyBuilder::new("dictionary").f64s(dict.atoms().as_slice()).finish();
        let options = serde_json::to_vec(&cfg.schedule.coding).expect("options serialize");
        self.exec
            .try_map(self.corpus.len(), |i| {
                let key = KeyBuilder::new("encode")
                    .part(self.descriptor_keys[i].as_bytes())
                    .part(dict_key.as_bytes())
                    .f64s(&[cfg.lambda])
                    .part(&options)
                    .finish();
                self.cache.get_or_compute(
                    "codes",
                    &key,
                    CodeMatrix::to_bytes,
                    CodeMatrix::from_bytes,
                    || encoder.encode_set(&self.descriptors[i], Exec::Sequential),
                )
            })
            .map_err(|e| e.in_stage("encode"))
    }

    /// Runs one split/learn/encode/pool/classify trial.
    pub fn run_trial(&self, seed: u64) -> Result<TrialResult> {
        let cfg = self.config;
        let corpus = self.corpus;
        let split = make_split(&corpus.manifest, cfg.n_train, seed).map_err(|e| e.in_stage("split"))?;
        let mut warnings = split.warnings.clone();

        let dict = match &self.shared {
            Some(d) => d.clone(),
            None => self.dictionary(&split.train, seed)?,
        };
        let codes = self.encode_all(&dict)?;

        let pooled: Vec<ImageDescriptor> = self
            .exec
            .try_map(corpus.len(), |i| {
                let img = &corpus.images[i];
                describe_image(
                    &codes[i],
                    self.descriptors[i].locations(),
                    &self.layouts[&img.dims()],
                    corpus.id(i),
                )
            })
            .map_err(|e| e.in_stage("pool"))?;

        let classes: Vec<usize> = corpus.manifest.entries().iter().map(|e| e.class).collect();
        let class_count = corpus.labels().len();
        let train: Vec<(&ImageDescriptor, usize)> = split.train.iter().map(|&i| (&pooled[i], classes[i])).collect();
        let mut pond = FeaturePond::build(&train, cfg.effective_k(), cfg.lambda_clf)
            .and_then(|p| p.with_class_count(class_count))
            .map_err(|e| e.in_stage("classify"))?;
        pond.level_filtered = cfg.level_filtered;
        pond.labels = corpus.labels().to_vec();
        pond.seed = Some(seed);
        if pond.dropped_columns() > 0 {
            warnings.push(format!("dropped {} zero pond columns", pond.dropped_columns()));
        }

        let tests: Vec<&ImageDescriptor> = split.test.iter().map(|&i| &pooled[i]).collect();
        let scores = classify_batch(&pond, &tests, self.exec).map_err(|e| e.in_stage("classify"))?;

        let mut counts = vec![vec![0usize; class_count]; class_count];
        let mut predictions = Vec::with_capacity(tests.len());
        let mut seen = BTreeSet::new();
        for (&i, s) in split.test.iter().zip(scores) {
            counts[classes[i]][s.predicted] += 1;
            for w in s.warnings {
                if seen.insert(w.clone()) {
                    warnings.push(w);
                }
            }
            predictions.push(ImagePrediction {
                trial: 0,
                image: corpus.id(i),
                truth: classes[i],
                predicted: s.predicted,
                scores: s.scores,
            });
        }
        let correct = predictions.iter().filter(|p| p.truth == p.predicted).count();
        Ok(TrialResult {
            labels: corpus.labels().to_vec(),
            seeds: vec![seed],
            accuracies: vec![correct as f64 / predictions.len() as f64],
            counts,
            predictions,
            warnings,
        })
    }
}

/// Per-trial seeds drawn from the master seed.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    let mut rng = seeded_rng(master);
    (0..trials).map(|_| rng.next_u64()).collect()
}

/// One trial without caching.
pub fn run_trial(corpus: &Corpus, config: &ExperimentConfig, seed: u64) -> Result<TrialResult> {
    let cache = StageCache::disabled();
    Prepared::new(corpus, config, &cache, Exec::default())?.run_trial(seed)
}

/// Runs `config.trials` trials and aggregates them. Any failing trial fails
/// the whole evaluation; partial results are never reported.
pub fn evaluate(corpus: &Corpus, config: &ExperimentConfig, cache: &StageCache, exec: Exec) -> Result<TrialResult> {
    let prepared = Prepared::new(corpus, config, cache, exec)?;
    let seeds = trial_seeds(config.seed, config.trials);
    let trial_exec = if config.parallel_trials { exec } else { Exec::Sequential };
    let results = trial_exec.try_map(seeds.len(), |t| {
        let r = prepared.run_trial(seeds[t]);
        if let Ok(r) = &r {
            log::info!("trial {t}: accuracy {:.4}", r.accuracies[0]);
        }
        r
    })?;
    TrialResult::merge(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::synth::{make_synthetic, SynthOptions};
    use crate::pyramid::PyramidConfig;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            dict_size: 16,
            pyramid: PyramidConfig::uniform(&[1, 2], 1).unwrap(),
            n_train: 1,
            trials: 2,
            k: Some(8),
            schedule: crate::sparse::LearnSchedule {
                max_alternations: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn small_corpus() -> Corpus {
        let set = make_synthetic(&SynthOptions {
            class_count: 2,
            samples_per_class: 3,
            size: 48,
            seed: 1,
            jitter: true,
        })
        .unwrap();
        Corpus::from_synthetic(&set).unwrap()
    }

    #[test]
    fn aggregates_and_normalizes() {
        let corpus = small_corpus();
        let r = evaluate(&corpus, &small_config(), &StageCache::disabled(), Exec::default()).unwrap();
        assert_eq!(r.trials(), 2);
        assert_eq!(r.predictions.len(), 8);
        for row in r.confusion() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for t in 0..2 {
            let preds: Vec<_> = r.predictions.iter().filter(|p| p.trial == t).collect();
            let correct = preds.iter().filter(|p| p.truth == p.predicted).count();
            assert_eq!(r.accuracies[t], correct as f64 / preds.len() as f64);
        }
    }

    #[test]
    fn single_trial_has_zero_std() {
        let r = run_trial(&small_corpus(), &small_config(), 5).unwrap();
        assert_eq!(r.std_accuracy(), 0.0);
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let config = ExperimentConfig {
            n_train: 3,
            ..small_config()
        };
        let err = run_trial(&small_corpus(), &config, 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn empty_region_is_reported_from_pool_stage() {
        let config = ExperimentConfig {
            pyramid: PyramidConfig::uniform(&[6], 1).unwrap(),
            ..small_config()
        };
        let err = run_trial(&small_corpus(), &config, 0).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "pool", .. }), "{err}");
        assert!(matches!(err.root(), Error::EmptyRegion { .. }));
    }

    #[test]
    fn cached_rerun_matches_fresh_run() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus();
        let config = small_config();
        let fresh = evaluate(&corpus, &config, &StageCache::disabled(), Exec::Sequential).unwrap();
        let cache = StageCache::at(dir.path());
        let first = evaluate(&corpus, &config, &cache, Exec::Parallel).unwrap();
        let misses = cache.misses();
        let again = StageCache::at(dir.path());
        let second = evaluate(&corpus, &config, &again, Exec::Parallel).unwrap();
        assert_eq!(again.misses(), 0);
        assert_eq!(again.hits(), misses);
        assert_eq!(fresh, first);
        assert_eq!(first, second);
    }

    #[test]
    fn merge_rejects_empty() {
        assert!(TrialResult::merge(vec![]).is_err());
    }
}
