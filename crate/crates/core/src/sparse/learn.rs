use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{dict_update_lagrange_dual, CodeMatrix, Dictionary, Encoder, FeatureSignOptions};
use crate::corpus::seeded_rng;
use crate::descriptor::DenseDescriptorSet;
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Alternation schedule for [`learn_dictionary`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnSchedule {
    pub max_alternations: usize,
    /// Stop when the relative objective change drops below this.
    pub rel_tol: f64,
    pub coding: FeatureSignOptions,
}

impl Default for LearnSchedule {
    fn default() -> Self {
        Self {
            max_alternations: 30,
            rel_tol: 1e-4,
            coding: FeatureSignOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnedDictionary {
    pub dictionary: Dictionary,
    /// Objective after each coding pass.
    pub objective_history: Vec<f64>,
    pub alternations: usize,
    /// Atoms re-seeded because no descriptor used them.
    pub reseeded: usize,
}

/// Gathers descriptors from `sets` into a `d`x`n` pool, dropping zero
/// descriptors. When more than `cap` remain, a seeded uniform subsample
/// (in original order) is kept.
pub fn sample_pool(sets: &[&DenseDescriptorSet], cap: Option<usize>, seed: u64) -> Result<DMatrix<f64>> {
    let dim = match sets.first() {
        Some(s) => s.dim(),
        None => return Err(Error::validation("no descriptor sets to pool")),
    };
    let mut refs: Vec<&[f32]> = Vec::new();
    for s in sets {
        if s.dim() != dim {
            return Err(Error::validation("descriptor sets disagree on dimension"));
        }
        refs.extend(s.iter().filter(|d| d.iter().any(|&v| v != 0.0)));
    }
    if let Some(cap) = cap {
        if refs.len() > cap {
            let mut rng = seeded_rng(seed);
            let mut keep = rand::seq::index::sample(&mut rng, refs.len(), cap).into_vec();
            keep.sort_unstable();
            refs = keep.into_iter().map(|i| refs[i]).collect();
        }
    }
    Ok(DMatrix::from_fn(dim, refs.len(), |i, j| refs[j][i] as f64))
}

/// Learns a `size`-atom dictionary from the columns of `pool` by alternating
/// feature-sign coding and Lagrange-dual dictionary updates.
pub fn learn_dictionary(
    pool: &DMatrix<f64>,
    size: usize,
    lambda: f64,
    schedule: &LearnSchedule,
    seed: u64,
    exec: Exec,
) -> Result<LearnedDictionary> {
    if size == 0 {
        return Err(Error::validation("dictionary size must be positive"));
    }
    if pool.ncols() < size {
        return Err(Error::validation(format!(
            "pool of {} descriptors is smaller than dictionary size {size}",
            pool.ncols()
        )));
    }
    if schedule.max_alternations == 0 {
        return Err(Error::validation("at least one alternation is required"));
    }
    let nonzero: Vec<usize> = (0..pool.ncols())
        .filter(|&j| pool.column(j).iter().any(|v| *v != 0.0))
        .collect();
    if nonzero.len() < size {
        return Err(Error::validation(format!(
            "only {} nonzero descriptors for {size} atoms",
            nonzero.len()
        )));
    }

    let mut rng = seeded_rng(seed);
    let picks = rand::seq::index::sample(&mut rng, nonzero.len(), size);
    let init = DMatrix::from_fn(pool.nrows(), size, |i, k| pool[(i, nonzero[picks.index(k)])]);
    let mut dict = Dictionary::from_unnormalized(init)?;

    let mut history = Vec::new();
    let mut reseeded = 0;
    let mut alternations = 0;
    for _ in 0..schedule.max_alternations {
        alternations += 1;
        let encoder = Encoder::with_options(dict.clone(), lambda, schedule.coding)?;
        let codes = encoder.encode_columns(pool, exec)?;
        let f = dict.objective(pool, &codes, lambda);
        log::debug!("alternation {alternations}: objective {f}");
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| (prev - f).abs() <= schedule.rel_tol * prev.abs());
        history.push(f);
        if converged || alternations == schedule.max_alternations {
            break;
        }
        let update = dict_update_lagrange_dual(pool, codes.matrix(), &dict)?;
        dict = update.dictionary;
        reseeded += reseed_unused(&mut dict, pool, &codes)?;
    }

    Ok(LearnedDictionary {
        dictionary: dict,
        objective_history: history,
        alternations,
        reseeded,
    })
}

/// Replaces atoms with an all-zero code row by the normalized descriptors
/// that are currently reconstructed worst. Unused atoms do not enter the
/// objective, so this never increases it.
fn reseed_unused(dict: &mut Dictionary, pool: &DMatrix<f64>, codes: &CodeMatrix) -> Result<usize> {
    let a = codes.matrix();
    let unused: Vec<usize> = (0..a.nrows())
        .filter(|&i| a.row(i).iter().all(|v| *v == 0.0))
        .collect();
    if unused.is_empty() {
        return Ok(0);
    }
    let residual = pool - dict.atoms() * a;
    let mut order: Vec<(f64, usize)> = residual
        .column_iter()
        .enumerate()
        .map(|(j, c)| (c.norm_squared(), j))
        .filter(|(r, j)| *r > 0.0 && pool.column(*j).norm() > 0.0)
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let mut atoms = dict.atoms().clone();
    let mut count = 0;
    for (&atom, &(_, j)) in unused.iter().zip(&order) {
        let col = pool.column(j);
        atoms.set_column(atom, &(col / col.norm()));
        count += 1;
    }
    *dict = Dictionary::new(atoms)?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_smaller_than_dictionary_rejected() {
        let pool = DMatrix::from_element(4, 3, 0.5);
        assert!(matches!(
            learn_dictionary(&pool, 5, 0.1, &LearnSchedule::default(), 0, Exec::Sequential),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn huge_lambda_kills_all_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = DMatrix::from_fn(6, 20, |_, _| rng.random::<f64>() - 0.5);
        let max_norm = pool.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
        let r = learn_dictionary(&pool, 4, 2.0 * max_norm + 1.0, &LearnSchedule::default(), 0, Exec::Sequential);
        assert!(matches!(r, Err(Error::DegenerateCodes)));
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pool = DMatrix::from_fn(8, 60, |_, _| rng.random::<f64>() - 0.5);
        let schedule = LearnSchedule {
            max_alternations: 5,
            ..LearnSchedule::default()
        };
        let a = learn_dictionary(&pool, 6, 0.1, &schedule, 3, Exec::Parallel).unwrap();
        let b = learn_dictionary(&pool, 6, 0.1, &schedule, 3, Exec::Sequential).unwrap();
        assert_eq!(a.dictionary, b.dictionary);
        assert_eq!(a.objective_history, b.objective_history);
    }

    #[test]
    fn objective_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pool = DMatrix::from_fn(8, 120, |_, _| rng.random::<f64>() - 0.5);
        let schedule = LearnSchedule {
            max_alternations: 15,
            rel_tol: 0.0,
            ..LearnSchedule::default()
        };
        let learned = learn_dictionary(&pool, 12, 0.1, &schedule, 1, Exec::default()).unwrap();
        assert_eq!(learned.objective_history.len(), 15);
        for w in learned.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-8, "{:?}", learned.objective_history);
        }
        for col in learned.dictionary.atoms().column_iter() {
            let n = col.norm();
            assert!(n > 0.0 && n <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn pool_drops_zero_descriptors_and_caps() {
        let set = DenseDescriptorSet::new(
            (32, 32),
            2,
            vec![(1, 1), (2, 2), (3, 3), (4, 4)],
            vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.5, 0.5],
        )
        .unwrap();
        let pool = sample_pool(&[&set], None, 0).unwrap();
        assert_eq!(pool.ncols(), 3);
        let capped = sample_pool(&[&set], Some(2), 9).unwrap();
        assert_eq!(capped.ncols(), 2);
        assert_eq!(capped, sample_pool(&[&set], Some(2), 9).unwrap());
    }
}
