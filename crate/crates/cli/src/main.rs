//! `lccrc` command-line driver.
//!
//! Exit codes: 0 success, 2 validation/format error, 3 sparse coding did not
//! converge, 4 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lccrc::classifier::{classify, FeaturePond};
use lccrc::corpus::DatasetManifest;
use lccrc::descriptor::{extract_all_with, DenseDescriptorSet};
use lccrc::experiment::{evaluate, make_synthetic, write_report, Corpus, ExperimentConfig, StageCache, SynthOptions};
use lccrc::image::load_image;
use lccrc::pyramid::{build_layout, describe_image, ImageDescriptor, PyramidConfig};
use lccrc::sparse::{learn_dictionary, sample_pool, CodeMatrix, Dictionary, Encoder};
use lccrc::Exec;

#[derive(Parser)]
#[command(name = "lccrc", version, about = "Sparse-coded pyramid features with locality-constrained collaborative classification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Flags overriding the experiment configuration.
#[derive(Args, Default)]
struct Common {
    /// JSON experiment configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long = "lambda-clf", global = true)]
    lambda_clf: Option<f64>,
    /// Sparsity penalty of the descriptor codes.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Comma-separated pyramid grid sizes, e.g. "3,4,5".
    #[arg(long, global = true)]
    levels: Option<String>,
    /// Overlap patterns per level (1-4).
    #[arg(long, global = true)]
    patterns: Option<usize>,
    #[arg(long = "dict-size", global = true)]
    dict_size: Option<usize>,
    #[arg(long = "n-train", global = true)]
    n_train: Option<usize>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Learn one dictionary from all images instead of per-trial training images.
    #[arg(long = "shared-dictionary", global = true)]
    shared_dictionary: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Extract dense descriptors into `<out>/<stem>.desc` (`<out>/<label>/<stem>.desc` for manifest entries).
    Extract {
        images: Vec<PathBuf>,
        /// Also extract every image listed in this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Learn a dictionary from descriptor files.
    LearnDict {
        #[arg(required = true)]
        descriptors: Vec<PathBuf>,
    },
    /// Sparse-code a descriptor file.
    Encode {
        #[arg(long)]
        dict: PathBuf,
        descriptors: PathBuf,
    },
    /// Max-pool codes over the spatial pyramid.
    Pool {
        #[arg(long)]
        codes: PathBuf,
        /// Descriptor file the codes came from (supplies locations and image size).
        #[arg(long)]
        descriptors: PathBuf,
    },
    /// Build a feature pond from a manifest of pooled descriptor files.
    BuildPond {
        manifest: PathBuf,
        /// Restrict neighbour search to the query column's level.
        #[arg(long = "level-filtered")]
        level_filtered: bool,
    },
    /// Classify one image (or a pooled descriptor file); prints JSON scores.
    Classify {
        #[arg(long)]
        pond: PathBuf,
        /// Pooled descriptor file.
        #[arg(long, conflicts_with = "image")]
        pooled: Option<PathBuf>,
        /// Raw image; needs --dict.
        #[arg(long, requires = "dict")]
        image: Option<PathBuf>,
        #[arg(long)]
        dict: Option<PathBuf>,
    },
    /// Run the full multi-trial protocol and write CSV/JSON reports.
    Evaluate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Cache descriptors, dictionaries and codes here.
        #[arg(long = "cache-dir")]
        cache_dir: Option<PathBuf>,
        #[arg(long = "parallel-trials")]
        parallel_trials: bool,
    },
    /// Generate a synthetic texture corpus with a manifest.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Disable per-sample phase, shift and scale jitter.
        #[arg(long = "no-jitter")]
        no_jitter: bool,
    },
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.k {
            c.k = Some(v);
        }
        if let Some(v) = self.lambda_clf {
            c.lambda_clf = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.dict_size {
            c.dict_size = v;
        }
        if let Some(v) = self.n_train {
            c.n_train = v;
        }
        if let Some(v) = self.trials {
            c.trials = v;
        }
        if self.shared_dictionary {
            c.shared_dictionary = true;
        }
        match (&self.levels, self.patterns) {
            (Some(l), p) => c.pyramid = PyramidConfig::parse_levels(l, p.unwrap_or(4))?,
            (None, Some(p)) => {
                let grids: Vec<usize> = c.pyramid.levels.iter().map(|l| l.grid).collect();
                c.pyramid = PyramidConfig::uniform(&grids, p)?;
            }
            (None, None) => {}
        }
        Ok(c)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("--out is required for this subcommand")
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    let common = &cli.common;
    let config = common.resolve()?;
    match cli.command {
        Command::Extract { images, manifest } => {
            let out = common.out()?;
            // Manifest entries go under a per-label directory so stems cannot collide.
            let mut jobs: Vec<(PathBuf, PathBuf)> = images
                .iter()
                .map(|p| (p.clone(), out.join(format!("{}.desc", stem(p)))))
                .collect();
            if let Some(m) = manifest {
                for e in DatasetManifest::load(&m)?.entries() {
                    jobs.push((e.path.clone(), out.join(&e.label).join(format!("{}.desc", stem(&e.path)))));
                }
            }
            anyhow::ensure!(!jobs.is_empty(), lccrc::Error::Validation("no images given".into()));
            exec.try_map(jobs.len(), |i| -> lccrc::Result<()> {
                let (src, target) = &jobs[i];
                let img = load_image(src)?.limit_dimension(config.max_dimension);
                extract_all_with(&img, &config.grid, Exec::Sequential)?.save(target)
            })?;
            for (_, target) in jobs {
                println!("{}", target.display());
            }
        }
        Command::LearnDict { descriptors } => {
            let out = common.out()?;
            let sets = descriptors
                .iter()
                .map(|p| DenseDescriptorSet::load(p))
                .collect::<lccrc::Result<Vec<_>>>()?;
            let refs: Vec<&DenseDescriptorSet> = sets.iter().collect();
            let pool = sample_pool(&refs, config.pool_cap, config.seed)?;
            let learned = learn_dictionary(&pool, config.dict_size, config.lambda, &config.schedule, config.seed, exec)?;
            let meta = serde_json::json!({
                "seed": config.seed,
                "pool_size": pool.ncols(),
                "alternations": learned.alternations,
                "objective_history": learned.objective_history,
                "reseeded_atoms": learned.reseeded,
                "schedule": config.schedule,
            });
            learned.dictionary.save(out, config.lambda, &meta)?;
            log::info!("wrote {}", out.display());
        }
        Command::Encode { dict, descriptors } => {
            let out = common.out()?;
            let (dictionary, lambda) = Dictionary::load(&dict)?;
            let lambda = common.lambda.unwrap_or(lambda);
            let encoder = Encoder::with_options(dictionary, lambda, config.schedule.coding)?;
            let codes = encoder.encode_set(&DenseDescriptorSet::load(&descriptors)?, exec)?;
            write_bytes(out, &codes.to_bytes())?;
        }
        Command::Pool { codes, descriptors } => {
            let out = common.out()?;
            let codes = CodeMatrix::from_bytes(&read_bytes(&codes)?)?;
            let descs = DenseDescriptorSet::load(&descriptors)?;
            let layout = build_layout(descs.dims(), &config.pyramid, &config.grid)?;
            describe_image(&codes, descs.locations(), &layout, stem(&descriptors))?.save(out)?;
        }
        Command::BuildPond { manifest, level_filtered } => {
            let out = common.out()?;
            let manifest = DatasetManifest::load(&manifest)?;
            let pooled = manifest
                .entries()
                .iter()
                .map(|e| ImageDescriptor::load(&e.path, stem(&e.path)))
                .collect::<lccrc::Result<Vec<_>>>()?;
            let train: Vec<(&ImageDescriptor, usize)> =
                pooled.iter().zip(manifest.entries()).map(|(d, e)| (d, e.class)).collect();
            let mut pond = FeaturePond::build(&train, config.effective_k(), config.lambda_clf)?
                .with_class_count(manifest.class_count())?;
            pond.level_filtered = level_filtered || config.level_filtered;
            pond.labels = manifest.labels().to_vec();
            pond.seed = Some(config.seed);
            pond.save(out)?;
            log::info!("pond of {} columns ({} zero columns dropped)", pond.len(), pond.dropped_columns());
        }
        Command::Classify { pond, pooled, image, dict } => {
            let mut pond = FeaturePond::load(&pond)?;
            if let Some(k) = common.k {
                pond.k = k;
            }
            if let Some(l) = common.lambda_clf {
                pond.lambda = l;
            }
            let (test, id) = match (pooled, image, dict) {
                (Some(p), _, _) => (ImageDescriptor::load(&p, stem(&p))?, p),
                (None, Some(img_path), Some(dict)) => {
                    let (dictionary, lambda) = Dictionary::load(&dict)?;
                    let img = load_image(&img_path)?.limit_dimension(config.max_dimension);
                    let descs = extract_all_with(&img, &config.grid, exec)?;
                    let encoder = Encoder::with_options(dictionary, common.lambda.unwrap_or(lambda), config.schedule.coding)?;
                    let codes = encoder.encode_set(&descs, exec)?;
                    let layout = build_layout(img.dims(), &config.pyramid, &config.grid)?;
                    (describe_image(&codes, descs.locations(), &layout, stem(&img_path))?, img_path)
                }
                _ => anyhow::bail!(lccrc::Error::Validation("give --pooled, or --image with --dict".into())),
            };
            let scores = classify(&pond, &test, pond.k, pond.lambda)?;
            let mut json = scores.to_json(&pond.labels);
            json["input"] = serde_json::Value::String(id.display().to_string());
            print_json(&json);
        }
        Command::Evaluate {
            manifest,
            cache_dir,
            parallel_trials,
        } => {
            let mut config = config;
            if manifest.is_some() {
                config.manifest = manifest;
            }
            if cache_dir.is_some() {
                config.cache_dir = cache_dir;
            }
            config.parallel_trials |= parallel_trials;
            if common.out.is_some() {
                config.out_dir = common.out.clone();
            }
            config.validate()?;
            let out = config.out_dir.clone().context("--out (or out_dir in the config) is required")?;
            let corpus = Corpus::from_config(&config, exec)?;
            let cache = match &config.cache_dir {
                Some(d) => StageCache::at(d),
                None => StageCache::disabled(),
            };
            let result = evaluate(&corpus, &config, &cache, exec)?;
            let paths = write_report(&result, &config, &out)?;
            for w in result.warnings.iter().chain(&paths.warnings) {
                log::warn!("{w}");
            }
            print_json(&serde_json::json!({
                "trials": result.trials(),
                "mean_accuracy": result.mean_accuracy(),
                "std_accuracy": result.std_accuracy(),
                "accuracies": result.accuracies,
                "accuracy_csv": paths.accuracy,
                "confusion_csv": paths.confusion,
                "config_json": paths.config,
                "cache_hits": cache.hits(),
            }));
        }
        Command::Synth {
            classes,
            samples,
            size,
            no_jitter,
        } => {
            let out = common.out()?;
            let set = make_synthetic(&SynthOptions {
                class_count: classes,
                samples_per_class: samples,
                size,
                seed: config.seed,
                jitter: !no_jitter,
            })?;
            set.write(out)?;
            println!("{}", out.join("manifest.jsonl").display());
        }
    }
    Ok(())
}

fn read_bytes(path: &Path) -> lccrc::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| lccrc::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> lccrc::Result<()> {
    let io = |e| lccrc::Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<lccrc::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
