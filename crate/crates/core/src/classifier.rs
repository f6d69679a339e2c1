//! Feature pond and the locality-constrained collaborative representation
//! classifier.
//!
//! Every pooled training column is unit-normalized into the pond. For each
//! test column `z_m`, the `K` nearest pond columns are found, `z_m` is coded
//! over them by ridge regression, and each class reconstructs `z_m` from its
//! own share of the coefficients. A class scores the sum over levels of its
//! smallest reconstruction error within that level; the lowest score wins.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::container::{self, Kind, Reader, Writer};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::pyramid::ImageDescriptor;

/// Ridge penalty of the classifier.
pub const DEFAULT_LAMBDA_CLF: f64 = 0.001;

/// Test columns screened per blocked pond product.
const DOT_BLOCK: usize = 32;

/// Neighbour count: 100 for small training sets, 300 otherwise.
pub fn default_k(n_train_per_class: usize) -> usize {
    if n_train_per_class <= 5 {
        100
    } else {
        300
    }
}

/// Unit-normalized pooled training columns with their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePond {
    columns: DMatrix<f64>,
    /// Squared column norms, for screening neighbour distances.
    sq_norms: Vec<f64>,
    classes: Vec<usize>,
    levels: Vec<usize>,
    images: Vec<usize>,
    class_count: usize,
    dropped: usize,
    pub k: usize,
    pub lambda: f64,
    /// Restrict neighbour search to pond columns of the query's level.
    pub level_filtered: bool,
    pub labels: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PondMeta {
    labels: Vec<String>,
    level_tags: Vec<usize>,
    k: usize,
    lambda_clf: f64,
    seed: Option<u64>,
    level_filtered: bool,
    class_count: usize,
    dropped_zero_columns: usize,
}

impl FeaturePond {
    /// Builds the pond from training descriptors and their class indices.
    /// Zero columns are dropped and counted.
    pub fn build(train: &[(&ImageDescriptor, usize)], k: usize, lambda: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::validation("feature pond needs at least one training image"));
        }
        if k == 0 {
            return Err(Error::validation("K must be at least 1"));
        }
        check_lambda(lambda)?;
        let dim = train[0].0.code_size();
        let mut data = Vec::new();
        let (mut classes, mut levels, mut images) = (Vec::new(), Vec::new(), Vec::new());
        let mut dropped = 0;
        for (t, (desc, class)) in train.iter().enumerate() {
            if desc.code_size() != dim {
                return Err(Error::validation(format!(
                    "training image {t} has code size {}, expected {dim}",
                    desc.code_size()
                )));
            }
            for (m, col) in desc.pooled().column_iter().enumerate() {
                let norm = col.norm();
                if norm == 0.0 || !norm.is_finite() {
                    dropped += 1;
                    continue;
                }
                data.extend(col.iter().map(|v| v / norm));
                classes.push(*class);
                levels.push(desc.levels()[m]);
                images.push(t);
            }
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} zero columns from the feature pond");
        }
        if classes.is_empty() {
            return Err(Error::validation("every training column is zero"));
        }
        let class_count = classes.iter().max().map_or(0, |c| c + 1);
        let columns = DMatrix::from_vec(dim, classes.len(), data);
        Ok(Self {
            sq_norms: squared_norms(&columns),
            columns,
            classes,
            levels,
            images,
            class_count,
            dropped,
            k,
            lambda,
            level_filtered: false,
            labels: Vec::new(),
            seed: None,
        })
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    pub fn images(&self) -> &[usize] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn code_size(&self) -> usize {
        self.columns.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Raises the class count, for classes absent from the training columns.
    pub fn with_class_count(mut self, count: usize) -> Result<Self> {
        if count < self.class_count {
            return Err(Error::validation(format!(
                "class count {count} below largest pond class {}",
                self.class_count - 1
            )));
        }
        self.class_count = count;
        Ok(self)
    }

    pub fn dropped_columns(&self) -> usize {
        self.dropped
    }

    pub fn level_set(&self) -> BTreeSet<usize> {
        self.levels.iter().copied().collect()
    }

    fn candidates(&self, level: usize) -> Option<Vec<usize>> {
        self.level_filtered.then(|| {
            (0..self.len())
                .filter(|&j| self.levels[j] == level)
                .collect()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let as_u32 = |v: &[usize]| v.iter().map(|&x| x as u32).collect::<Vec<_>>();
        let mut w = Writer::new(Kind::Pond);
        w.u64(self.code_size() as u64)
            .u64(self.len() as u64)
            .u32s(&as_u32(&self.classes))
            .u32s(&as_u32(&self.levels))
            .u32s(&as_u32(&self.images))
            .f64s(self.columns.as_slice());
        w.finish()
    }

    fn meta(&self) -> PondMeta {
        PondMeta {
            labels: self.labels.clone(),
            level_tags: self.level_set().into_iter().collect(),
            k: self.k,
            lambda_clf: self.lambda,
            seed: self.seed,
            level_filtered: self.level_filtered,
            class_count: self.class_count,
            dropped_zero_columns: self.dropped,
        }
    }

    /// Writes the binary pond and a `.json` metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())?;
        let meta = serde_json::to_string_pretty(&self.meta()).expect("pond metadata serializes");
        container::write_file(&path.with_extension("json"), meta.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = container::read_file(path)?;
        let mut r = Reader::new(&bytes, Kind::Pond)?;
        let meta_path = path.with_extension("json");
        let meta_raw = container::read_file(&meta_path)?;
        let meta: PondMeta = serde_json::from_slice(&meta_raw)
            .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
        let dim = r.len()?;
        let n = r.len()?;
        let to_usize = |v: Vec<u32>| v.into_iter().map(|x| x as usize).collect::<Vec<_>>();
        let classes = to_usize(r.u32s(n)?);
        let levels = to_usize(r.u32s(n)?);
        let images = to_usize(r.u32s(n)?);
        let data = r.f64s(dim * n)?;
        r.finish()?;
        if classes.iter().any(|&c| c >= meta.class_count) {
            return Err(Error::Format("pond class index exceeds class count".into()));
        }
        let columns = DMatrix::from_vec(dim, n, data);
        Ok(Self {
            sq_norms: squared_norms(&columns),
            columns,
            classes,
            levels,
            images,
            class_count: meta.class_count,
            dropped: meta.dropped_zero_columns,
            k: meta.k,
            lambda: meta.lambda_clf,
            level_filtered: meta.level_filtered,
            labels: meta.labels,
            seed: meta.seed,
        })
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("ridge penalty must be positive, got {lambda}")))
    }
}

fn unit(z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("query contains non-finite values"));
    }
    let n = z.norm();
    if n == 0.0 {
        return Err(Error::DegenerateQuery);
    }
    Ok(z / n)
}

fn squared_norms(columns: &DMatrix<f64>) -> Vec<f64> {
    columns.column_iter().map(|c| c.norm_squared()).collect()
}

/// Inner products of every pond column with every query column, as a
/// `queries × pond` matrix from one blocked product.
fn pond_dots(pond: &FeaturePond, queries: &[&DVector<f64>]) -> DMatrix<f64> {
    let dim = pond.code_size();
    let z_t = DMatrix::from_fn(queries.len(), dim, |m, i| queries[m][i]);
    z_t * &pond.columns
}

/// The `k` pond columns nearest to `z` by explicit squared distance, ties to
/// the smaller index.
///
/// `dot(j)` is `yⱼᵀz`. The expansion `‖yⱼ‖² + ‖z‖² − 2yⱼᵀz` screens the
/// pond cheaply; it differs from the explicit distance by at most `slack`,
/// so every true neighbour lies within `2·slack` of the k-th screened value
/// and only columns inside that band are ranked explicitly.
fn knn_among(pond: &FeaturePond, z: &DVector<f64>, dot: impl Fn(usize) -> f64, k: usize, candidates: Option<&[usize]>) -> Vec<usize> {
    let explicit = |j: usize| -> f64 {
        pond.columns
            .column(j)
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let z_sq = z.norm_squared();
    let screened = |j: usize| pond.sq_norms[j] + z_sq - 2.0 * dot(j);
    let mut approx: Vec<(f64, usize)> = match candidates {
        Some(c) => c.iter().map(|&j| (screened(j), j)).collect(),
        None => (0..pond.len()).map(|j| (screened(j), j)).collect(),
    };
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(approx.len());
    if k == 0 {
        return Vec::new();
    }
    let mut band: Vec<(f64, usize)> = if k < approx.len() {
        let max_sq = approx.iter().map(|&(_, j)| pond.sq_norms[j]).fold(0.0, f64::max);
        let scale = (max_sq.sqrt() + z_sq.sqrt()).powi(2);
        let slack = 4.0 * (pond.code_size() + 4) as f64 * f64::EPSILON * scale;
        approx.select_nth_unstable_by(k - 1, cmp);
        let limit = approx[k - 1].0 + 2.0 * slack;
        approx
            .into_iter()
            .filter(|&(d, _)| d <= limit)
            .map(|(_, j)| (explicit(j), j))
            .collect()
    } else {
        approx.into_iter().map(|(_, j)| (explicit(j), j)).collect()
    };
    if k < band.len() {
        band.select_nth_unstable_by(k - 1, cmp);
        band.truncate(k);
    }
    band.sort_unstable_by(cmp);
    band.into_iter().map(|(_, j)| j).collect()
}

/// Indices of the `k` pond columns nearest to `z` (normalized first), in
/// increasing distance, ties to the smaller index. `k` is clamped to the pond size.
pub fn knn_search(pond: &FeaturePond, z: &DVector<f64>, k: usize) -> Result<Vec<usize>> {
    if z.len() != pond.code_size() {
        return Err(Error::validation(format!(
            "query has dimension {}, pond has {}",
            z.len(),
            pond.code_size()
        )));
    }
    let z = unit(z)?;
    let dots = pond_dots(pond, &[&z]);
    Ok(knn_among(pond, &z, |j| dots[(0, j)], k, None))
}

/// Ridge coefficients `(YᵀY + λI)⁻¹ Yᵀ z`, via Cholesky of the Gram system.
pub fn ridge_solve(y: &DMatrix<f64>, z: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    check_lambda(lambda)?;
    if y.nrows() != z.len() {
        return Err(Error::validation(format!(
            "ridge system has {} rows but target has {}",
            y.nrows(),
            z.len()
        )));
    }
    if y.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::validation("ridge inputs contain non-finite values"));
    }
    let mut gram = y.tr_mul(y);
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let rhs = y.tr_mul(z);
    let ch = gram
        .cholesky()
        .ok_or_else(|| Error::validation("ridge Gram matrix is not positive definite"))?;
    Ok(ch.solve(&rhs))
}

/// Coefficients of one test column over its neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCode {
    pub neighbors: Vec<usize>,
    pub coefficients: DVector<f64>,
}

impl LocalCode {
    /// Embeds the coefficients into a pond-length vector, zeros elsewhere.
    pub fn embed(&self, pond_len: usize) -> DVector<f64> {
        let mut a = DVector::zeros(pond_len);
        for (&j, &c) in self.neighbors.iter().zip(self.coefficients.iter()) {
            a[j] = c;
        }
        a
    }
}

/// Per-class scores `r_c` and the predicted class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub scores: Vec<f64>,
    pub predicted: usize,
    /// `e_c(m)` per test column; `None` for skipped zero columns.
    pub column_errors: Vec<Option<Vec<f64>>>,
    pub warnings: Vec<String>,
}

impl ClassScores {
    /// `{"predicted": label, "scores": {label: r_c}}`; class indices stand in
    /// for missing labels.
    pub fn to_json(&self, labels: &[String]) -> serde_json::Value {
        let name = |c: usize| labels.get(c).cloned().unwrap_or_else(|| c.to_string());
        let scores: serde_json::Map<String, serde_json::Value> = self
            .scores
            .iter()
            .enumerate()
            .map(|(c, &r)| (name(c), serde_json::json!(r)))
            .collect();
        serde_json::json!({ "predicted": name(self.predicted), "scores": scores })
    }
}

fn check_compatible(pond: &FeaturePond, test: &ImageDescriptor) -> Result<()> {
    if test.code_size() != pond.code_size() {
        return Err(Error::validation(format!(
            "test descriptor has code size {}, pond has {}",
            test.code_size(),
            pond.code_size()
        )));
    }
    let test_levels: BTreeSet<usize> = test.levels().iter().copied().collect();
    if test_levels != pond.level_set() {
        return Err(Error::validation(format!(
            "test levels {test_levels:?} do not match pond levels {:?}",
            pond.level_set()
        )));
    }
    Ok(())
}

/// Local codes of every test column; `None` marks a zero column.
pub fn local_codes(pond: &FeaturePond, test: &ImageDescriptor, k: usize, lambda: f64) -> Result<Vec<Option<LocalCode>>> {
    check_compatible(pond, test)?;
    check_lambda(lambda)?;
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    let units = (0..test.len())
        .map(|m| match unit(&test.pooled().column(m).clone_owned()) {
            Ok(z) => Ok(Some(z)),
            Err(Error::DegenerateQuery) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut codes = Vec::with_capacity(test.len());
    // bounded blocks keep the dot-product matrix small on large ponds
    for (block, chunk) in units.chunks(DOT_BLOCK).enumerate() {
        let queries: Vec<&DVector<f64>> = chunk.iter().flatten().collect();
        let dots = pond_dots(pond, &queries);
        let mut row = 0;
        for (offset, z) in chunk.iter().enumerate() {
            let Some(z) = z else {
                codes.push(None);
                continue;
            };
            let m = block * DOT_BLOCK + offset;
            let candidates = pond.candidates(test.levels()[m]);
            let r = row;
            let neighbors = knn_among(pond, z, |j| dots[(r, j)], k, candidates.as_deref());
            row += 1;
            let y_k = pond.columns.select_columns(&neighbors);
            let coefficients = ridge_solve(&y_k, z, lambda)?;
            codes.push(Some(LocalCode {
                neighbors,
                coefficients,
            }));
        }
    }
    Ok(codes)
}

/// Collaborative codes of every test column over the whole pond, in pond order.
pub fn full_codes(pond: &FeaturePond, test: &ImageDescriptor, lambda: f64) -> Result<Vec<Option<LocalCode>>> {
    check_compatible(pond, test)?;
    check_lambda(lambda)?;
    let y = &pond.columns;
    let (dim, n) = y.shape();
    // (YᵀY + λI)⁻¹Yᵀ = Yᵀ(YYᵀ + λI)⁻¹; factor whichever side is smaller
    let small_side = if n <= dim { y.tr_mul(y) } else { y * y.transpose() };
    let mut gram = small_side;
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let ch = gram
        .cholesky()
        .ok_or_else(|| Error::validation("collaborative Gram matrix is not positive definite"))?;
    let neighbors: Vec<usize> = (0..n).collect();
    (0..test.len())
        .map(|m| {
            let z = test.pooled().column(m).clone_owned();
            let z = match unit(&z) {
                Ok(z) => z,
                Err(Error::DegenerateQuery) => return Ok(None),
                Err(e) => return Err(e),
            };
            let coefficients = if n <= dim {
                ch.solve(&y.tr_mul(&z))
            } else {
                y.tr_mul(&ch.solve(&z))
            };
            Ok(Some(LocalCode {
                neighbors: neighbors.clone(),
                coefficients,
            }))
        })
        .collect()
}

/// Per-level minimum class reconstruction errors, summed over levels.
pub fn score_codes(pond: &FeaturePond, test: &ImageDescriptor, codes: &[Option<LocalCode>]) -> ClassScores {
    let c_count = pond.class_count;
    let mut warnings = Vec::new();
    let column_errors: Vec<Option<Vec<f64>>> = codes
        .iter()
        .enumerate()
        .map(|(m, code)| {
            let code = code.as_ref()?;
            let z = test.pooled().column(m).normalize();
            let mut recon: Vec<Option<DVector<f64>>> = vec![None; c_count];
            for (&j, &coef) in code.neighbors.iter().zip(code.coefficients.iter()) {
                let slot = recon[pond.classes[j]].get_or_insert_with(|| DVector::zeros(z.len()));
                slot.axpy(coef, &pond.columns.column(j), 1.0);
            }
            Some(
                recon
                    .into_iter()
                    .map(|r| match r {
                        Some(r) => (&z - r).norm(),
                        None => 1.0,
                    })
                    .collect(),
            )
        })
        .collect();

    let levels: BTreeSet<usize> = test.levels().iter().copied().collect();
    let mut scores = vec![0.0; c_count];
    for &level in &levels {
        let mut best = vec![f64::INFINITY; c_count];
        let mut any = false;
        for (m, errors) in column_errors.iter().enumerate() {
            if test.levels()[m] != level {
                continue;
            }
            if let Some(errors) = errors {
                any = true;
                for (b, &e) in best.iter_mut().zip(errors) {
                    if e < *b {
                        *b = e;
                    }
                }
            }
        }
        if !any {
            let msg = format!("level {level} of '{}' has only zero columns", test.image_id);
            log::warn!("{msg}");
            warnings.push(msg);
            best.iter_mut().for_each(|b| *b = 1.0);
        }
        for (s, b) in scores.iter_mut().zip(&best) {
            *s += b;
        }
    }
    let predicted = argmin(&scores);
    ClassScores {
        scores,
        predicted,
        column_errors,
        warnings,
    }
}

fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = c;
        }
    }
    best
}

/// LC-CRC classification of one test image.
pub fn classify(pond: &FeaturePond, test: &ImageDescriptor, k: usize, lambda: f64) -> Result<ClassScores> {
    let codes = local_codes(pond, test, k, lambda)?;
    Ok(score_codes(pond, test, &codes))
}

/// Collaborative representation over the whole pond (the `K = pond size` case).
pub fn classify_full_crc(pond: &FeaturePond, test: &ImageDescriptor, lambda: f64) -> Result<ClassScores> {
    let codes = full_codes(pond, test, lambda)?;
    Ok(score_codes(pond, test, &codes))
}

/// Classifies many test images with the pond's own `k` and `lambda`.
pub fn classify_batch(pond: &FeaturePond, tests: &[&ImageDescriptor], exec: Exec) -> Result<Vec<ClassScores>> {
    exec.try_map(tests.len(), |i| classify(pond, tests[i], pond.k, pond.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn descriptor(cols: &[&[f64]], levels: &[usize]) -> ImageDescriptor {
        let d = cols[0].len();
        let data: Vec<f64> = cols.iter().flat_map(|c| c.iter().copied()).collect();
        ImageDescriptor::new(DMatrix::from_vec(d, cols.len(), data), levels.to_vec(), "t").unwrap()
    }

    fn random_desc(rng: &mut ChaCha8Rng, d: usize, levels: &[usize]) -> ImageDescriptor {
        let m = levels.len();
        ImageDescriptor::new(
            DMatrix::from_fn(d, m, |_, _| rng.random::<f64>()),
            levels.to_vec(),
            "r",
        )
        .unwrap()
    }

    #[test]
    fn default_k_follows_training_size() {
        assert_eq!(default_k(1), 100);
        assert_eq!(default_k(5), 100);
        assert_eq!(default_k(10), 300);
    }

    #[test]
    fn pond_columns_normalized_and_zero_dropped() {
        let a = descriptor(&[&[3.0, 4.0], &[0.0, 0.0], &[1.0, 0.0]], &[0, 0, 1]);
        let pond = FeaturePond::build(&[(&a, 2)], 1, 0.001).unwrap();
        assert_eq!(pond.len(), 2);
        assert_eq!(pond.dropped_columns(), 1);
        assert_eq!(pond.class_count(), 3);
        for col in pond.columns().column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-9);
        }
        assert!(FeaturePond::build(&[], 1, 0.001).is_err());
        assert!(FeaturePond::build(&[(&a, 0)], 0, 0.001).is_err());
    }

    #[test]
    fn pond_save_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_desc(&mut rng, 5, &[0, 1, 1]);
        let b = random_desc(&mut rng, 5, &[0, 1, 1]);
        let mut pond = FeaturePond::build(&[(&a, 0), (&b, 1)], 3, 0.001).unwrap();
        pond.labels = vec!["x".into(), "y".into()];
        pond.seed = Some(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pond.bin");
        pond.save(&path).unwrap();
        assert_eq!(FeaturePond::load(&path).unwrap(), pond);
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("pond.json")).unwrap()).unwrap();
        assert_eq!(meta["k"], 3);
        assert_eq!(meta["level_tags"], serde_json::json!([0, 1]));
    }

    #[test]
    fn knn_exact_match_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_desc(&mut rng, 6, &[0; 10]);
        let pond = FeaturePond::build(&[(&a, 0)], 1, 0.001).unwrap();
        let z = pond.columns().column(4).clone_owned() * 3.0;
        assert_eq!(knn_search(&pond, &z, 1).unwrap(), vec![4]);
        let all = knn_search(&pond, &z, 50).unwrap();
        assert_eq!(all.len(), 10);
        assert_eq!(all[0], 4);
        let d = |j: usize| (pond.columns().column(j) - z.normalize()).norm();
        for w in all.windows(2) {
            assert!(d(w[0]) <= d(w[1]));
        }
        assert!(matches!(
            knn_search(&pond, &DVector::zeros(6), 1),
            Err(Error::DegenerateQuery)
        ));
    }

    #[test]
    fn knn_ties_prefer_smaller_index() {
        let a = descriptor(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]], &[0, 0, 0]);
        let pond = FeaturePond::build(&[(&a, 0)], 1, 0.001).unwrap();
        let z = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(knn_search(&pond, &z, 2).unwrap(), vec![0, 2]);
    }

    proptest::proptest! {
        // Columns a rounding step apart stress the screening band.
        #[test]
        fn screened_knn_matches_explicit_ranking(seed: u64, k in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = random_desc(&mut rng, 7, &[0; 30]);
            let mut cols = base.pooled().clone();
            for j in 0..cols.ncols() {
                if rng.random::<f64>() < 0.5 {
                    let src = cols.column(rng.random_range(0..30)).clone_owned();
                    let nudge = 1.0 + rng.random_range(-4..=4) as f64 * f64::EPSILON;
                    cols.set_column(j, &(src * nudge));
                }
            }
            let desc = ImageDescriptor::new(cols, vec![0; 30], "n").unwrap();
            let pond = FeaturePond::build(&[(&desc, 0)], 1, 0.001).unwrap();
            let z = pond.columns().column(rng.random_range(0..30)).clone_owned();
            let unit_z = &z / z.norm();
            let mut want: Vec<(f64, usize)> = (0..pond.len())
                .map(|j| {
                    let d = pond.columns().column(j).iter().zip(unit_z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, j)
                })
                .collect();
            want.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = want.into_iter().take(k).map(|(_, j)| j).collect();
            proptest::prop_assert_eq!(knn_search(&pond, &z, k).unwrap(), want);
        }
    }

    #[test]
    fn ridge_orthonormal_closed_form_and_zero_target() {
        let y = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let z = DVector::from_vec(vec![0.3, -0.2, 0.9]);
        let a = ridge_solve(&y, &z, 0.5).unwrap();
        assert!((a[0] - 0.3 / 1.5).abs() < 1e-15);
        assert!((a[1] + 0.2 / 1.5).abs() < 1e-15);
        let zero = ridge_solve(&y, &DVector::zeros(3), 0.5).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(ridge_solve(&y, &z, 0.0).is_err());
        assert!(ridge_solve(&y, &DVector::from_vec(vec![f64::NAN, 0.0, 0.0]), 0.1).is_err());
    }

    #[test]
    fn ridge_handles_duplicate_columns() {
        let y = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let z = DVector::from_vec(vec![1.0, 0.0]);
        let a = ridge_solve(&y, &z, 0.001).unwrap();
        assert!((a[0] - a[1]).abs() < 1e-12);
    }

    #[test]
    fn single_class_always_predicted() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let train = random_desc(&mut rng, 4, &[0, 0, 1, 1]);
        let pond = FeaturePond::build(&[(&train, 0)], 3, 0.001).unwrap();
        for _ in 0..5 {
            let t = random_desc(&mut rng, 4, &[0, 1]);
            assert_eq!(classify(&pond, &t, 3, 0.001).unwrap().predicted, 0);
        }
    }

    #[test]
    fn duplicated_training_image_is_recognized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let levels = [0, 0, 0, 1, 1, 1];
        let imgs: Vec<ImageDescriptor> = (0..4).map(|_| random_desc(&mut rng, 12, &levels)).collect();
        let train: Vec<(&ImageDescriptor, usize)> = imgs.iter().enumerate().map(|(i, d)| (d, i)).collect();
        let pond = FeaturePond::build(&train, 6, 0.001).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let s = classify(&pond, img, 6, 0.001).unwrap();
            assert_eq!(s.predicted, i);
            assert!(s.scores[i] < 0.05, "{:?}", s.scores);
        }
    }

    #[test]
    fn level_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = random_desc(&mut rng, 4, &[0, 1]);
        let pond = FeaturePond::build(&[(&train, 0)], 2, 0.001).unwrap();
        let t = random_desc(&mut rng, 4, &[0, 2]);
        assert!(matches!(classify(&pond, &t, 2, 0.001), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_level_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_desc(&mut rng, 3, &[0, 1]);
        let b = random_desc(&mut rng, 3, &[0, 1]);
        let pond = FeaturePond::build(&[(&a, 0), (&b, 1)], 2, 0.001).unwrap();
        let t = descriptor(&[&[0.2, 0.5, 0.1], &[0.0, 0.0, 0.0]], &[0, 1]);
        let s = classify(&pond, &t, 2, 0.001).unwrap();
        assert_eq!(s.warnings.len(), 1);
        assert!(s.column_errors[1].is_none());
        for c in 0..2 {
            let e0 = s.column_errors[0].as_ref().unwrap()[c];
            assert!((s.scores[c] - (e0 + 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_lambda_drives_errors_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_desc(&mut rng, 5, &[0, 0, 1]);
        let b = random_desc(&mut rng, 5, &[0, 0, 1]);
        let pond = FeaturePond::build(&[(&a, 0), (&b, 1)], 6, 0.001).unwrap();
        let t = random_desc(&mut rng, 5, &[0, 1]);
        let s = classify_full_crc(&pond, &t, 1e12).unwrap();
        for errs in s.column_errors.iter().flatten() {
            for &e in errs {
                assert!((e - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scores_json_shape() {
        let s = ClassScores {
            scores: vec![0.5, 0.25],
            predicted: 1,
            column_errors: vec![],
            warnings: vec![],
        };
        let json = s.to_json(&["bark".into(), "wool".into()]);
        assert_eq!(json["predicted"], "wool");
        assert_eq!(json["scores"]["bark"], 0.5);
    }

    #[test]
    fn level_filtered_search_stays_in_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_desc(&mut rng, 4, &[0, 0, 1, 1, 1]);
        let mut pond = FeaturePond::build(&[(&a, 0)], 2, 0.001).unwrap();
        pond.level_filtered = true;
        let t = random_desc(&mut rng, 4, &[0, 1]);
        let codes = local_codes(&pond, &t, 10, 0.001).unwrap();
        let first = codes[0].as_ref().unwrap();
        assert_eq!(first.neighbors.len(), 2);
        assert!(first.neighbors.iter().all(|&j| pond.levels()[j] == 0));
        assert_eq!(codes[1].as_ref().unwrap().neighbors.len(), 3);
    }
}
