use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::ExperimentConfig;
use super::trial::TrialResult;
use crate::error::{Error, Result};

/// Files written by [`write_report`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportPaths {
    pub accuracy: PathBuf,
    pub confusion: PathBuf,
    pub config: PathBuf,
    /// Warnings raised while writing, e.g. classes that were never tested.
    pub warnings: Vec<String>,
}

/// Returns `dir/stem.ext`, or a timestamped sibling if that file exists.
fn fresh_path(dir: &Path, stem: &str, ext: &str, stamp: u64) -> PathBuf {
    let plain = dir.join(format!("{stem}.{ext}"));
    if !plain.exists() {
        return plain;
    }
    (0u32..)
        .map(|n| match n {
            0 => dir.join(format!("{stem}-{stamp}.{ext}")),
            n => dir.join(format!("{stem}-{stamp}-{n}.{ext}")),
        })
        .find(|p| !p.exists())
        .expect("unbounded search finds a free name")
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `accuracy.csv`, `confusion.csv` and `config.json` into `dir`.
/// Existing files are never overwritten.
pub fn write_report(result: &TrialResult, config: &ExperimentConfig, dir: &Path) -> Result<ReportPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let accuracy = fresh_path(dir, "accuracy", "csv", stamp);
    let confusion = fresh_path(dir, "confusion", "csv", stamp);
    let config_path = fresh_path(dir, "config", "json", stamp);

    let mut w = csv::Writer::from_path(&accuracy).map_err(|e| csv_error(&accuracy, e))?;
    let rows = result
        .accuracies
        .iter()
        .zip(&result.seeds)
        .enumerate()
        .map(|(t, (a, s))| [t.to_string(), s.to_string(), a.to_string()]);
    let summary = [
        ["mean".to_string(), String::new(), result.mean_accuracy().to_string()],
        ["std".to_string(), String::new(), result.std_accuracy().to_string()],
    ];
    w.write_record(["trial", "seed", "accuracy"]).map_err(|e| csv_error(&accuracy, e))?;
    for row in rows.chain(summary) {
        w.write_record(&row).map_err(|e| csv_error(&accuracy, e))?;
    }
    w.flush().map_err(|e| Error::io(&accuracy, e))?;

    let mut warnings = Vec::new();
    let mut w = csv::Writer::from_path(&confusion).map_err(|e| csv_error(&confusion, e))?;
    let header: Vec<&str> = std::iter::once("").chain(result.labels.iter().map(String::as_str)).collect();
    w.write_record(&header).map_err(|e| csv_error(&confusion, e))?;
    for (c, (label, row)) in result.labels.iter().zip(result.confusion()).enumerate() {
        if result.counts[c].iter().all(|&n| n == 0) {
            let msg = format!("class '{label}' had no test images; its confusion row is zero");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let record: Vec<String> = std::iter::once(label.clone())
            .chain(row.iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&record).map_err(|e| csv_error(&confusion, e))?;
    }
    w.flush().map_err(|e| Error::io(&confusion, e))?;

    std::fs::write(&config_path, config.to_json()).map_err(|e| Error::io(&config_path, e))?;
    Ok(ReportPaths {
        accuracy,
        confusion,
        config: config_path,
        warnings,
    })
}
