//! Dictionary update `min_D ‖X − D A‖²_F  s.t. ‖d_i‖ ≤ 1` through its
//! Lagrange dual.
//!
//! For multipliers `Λ = diag(λ) ≥ 0` and `M = AAᵀ + Λ`, `B = XAᵀ`, the dual is
//! `g(λ) = tr(XᵀX) − tr(B M⁻¹ Bᵀ) − Σλ_i`, with gradient `‖d_i‖² − 1` where
//! `D = B M⁻¹`, and Hessian `−2 (M⁻¹) ∘ (DᵀD)`. It is maximized by projected
//! Newton on the nonnegative orthant. Atoms whose code row is all zero do not
//! enter the objective and are returned unchanged.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::Dictionary;
use crate::error::{Error, Result};

const MAX_NEWTON: usize = 200;
const GRAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct DualUpdate {
    pub dictionary: Dictionary,
    /// One multiplier per atom; zero for atoms without codes.
    pub duals: DVector<f64>,
    pub iterations: usize,
    /// Largest projected dual gradient at exit.
    pub gradient_norm: f64,
}

struct DualState {
    lambda: DVector<f64>,
    value: f64,
    minv: DMatrix<f64>,
    dt: DMatrix<f64>,
}

struct Problem<'a> {
    aat: &'a DMatrix<f64>,
    b: &'a DMatrix<f64>,
    trace_xx: f64,
}

impl Problem<'_> {
    fn evaluate(&self, lambda: DVector<f64>) -> Option<DualState> {
        let mut m = self.aat.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda[i];
        }
        let ch: Cholesky<f64, Dyn> = m.cholesky()?;
        let minv = ch.inverse();
        // Dᵀ = M⁻¹ Bᵀ
        let dt = &minv * self.b.transpose();
        let trace_bmb = self.b.component_mul(&dt.transpose()).sum();
        let value = self.trace_xx - trace_bmb - lambda.sum();
        value.is_finite().then_some(DualState {
            lambda,
            value,
            minv,
            dt,
        })
    }
}

/// Reconstruction error `‖X − D A‖²_F` from Gram quantities.
fn frobenius_objective(trace_xx: f64, d: &DMatrix<f64>, b: &DMatrix<f64>, aat: &DMatrix<f64>) -> f64 {
    let dtd = d.tr_mul(d);
    trace_xx - 2.0 * d.component_mul(b).sum() + dtd.component_mul(aat).sum()
}

/// One dictionary update for fixed codes. `x` is `d`x`n`, `codes` is `D`x`n`.
pub fn dict_update_lagrange_dual(
    x: &DMatrix<f64>,
    codes: &DMatrix<f64>,
    init: &Dictionary,
) -> Result<DualUpdate> {
    let (d, n) = x.shape();
    let size = init.size();
    if n == 0 {
        return Err(Error::validation("dictionary update needs at least one sample"));
    }
    if codes.shape() != (size, n) || init.dim() != d {
        return Err(Error::validation(format!(
            "shape mismatch: X {d}x{n}, codes {}x{}, dictionary {}x{}",
            codes.nrows(),
            codes.ncols(),
            init.dim(),
            size
        )));
    }
    let used: Vec<usize> = (0..size)
        .filter(|&i| codes.row(i).iter().any(|v| *v != 0.0))
        .collect();
    if used.is_empty() {
        return Err(Error::DegenerateCodes);
    }

    let a = codes.select_rows(&used);
    let aat = &a * a.transpose();
    let b = x * a.transpose();
    let trace_xx = x.norm_squared();
    let problem = Problem {
        aat: &aat,
        b: &b,
        trace_xx,
    };
    let u = used.len();

    // start from the diagonal approximation, kept strictly positive
    let start = DVector::from_fn(u, |i, _| {
        let guess = b.column(i).norm() - aat[(i, i)];
        guess.max(0.0) + 1e-3 * (1.0 + aat[(i, i)])
    });
    let mut state = problem
        .evaluate(start)
        .ok_or_else(|| Error::validation("dual initialization is not positive definite"))?;

    let mut iterations = 0;
    let mut gradient_norm = f64::INFINITY;
    while iterations < MAX_NEWTON {
        iterations += 1;
        let dtd = &state.dt * state.dt.transpose();
        let grad = DVector::from_fn(u, |i, _| dtd[(i, i)] - 1.0);
        let projected = |i: usize| {
            if state.lambda[i] > 0.0 {
                grad[i]
            } else {
                grad[i].max(0.0)
            }
        };
        gradient_norm = (0..u).map(|i| projected(i).abs()).fold(0.0, f64::max);
        if gradient_norm < GRAD_TOL {
            break;
        }

        // Bertsekas' ε-active set: multipliers near the bound whose gradient
        // points outward are held by a plain gradient step; the rest get a
        // Newton step on their reduced Hessian.
        let eps = (0..u)
            .map(|i| state.lambda[i] - (state.lambda[i] + grad[i]).max(0.0))
            .map(f64::abs)
            .fold(0.0, f64::max)
            .min(1e-6);
        let free: Vec<usize> = (0..u)
            .filter(|&i| state.lambda[i] > eps || grad[i] > 0.0)
            .collect();
        let mut direction = grad.clone();
        if !free.is_empty() {
            let neg_hess = (2.0 * state.minv.component_mul(&dtd)).select_rows(&free).select_columns(&free);
            let g_free = DVector::from_fn(free.len(), |p, _| grad[free[p]]);
            if let Some(ch) = neg_hess.cholesky() {
                let step = ch.solve(&g_free);
                for (p, &i) in free.iter().enumerate() {
                    direction[i] = step[p];
                }
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = DVector::from_fn(u, |i, _| (state.lambda[i] + t * direction[i]).max(0.0));
            let predicted: f64 = (0..u).map(|i| grad[i] * (trial[i] - state.lambda[i])).sum();
            // Clipping at the bound can spoil a long step; short steps always ascend.
            if predicted <= 0.0 {
                t *= 0.5;
                continue;
            }
            if let Some(next) = problem.evaluate(trial) {
                if next.value - state.value >= 1e-4 * predicted {
                    accepted = Some(next);
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some(next) if next.value > state.value => state = next,
            _ => break,
        }
    }

    let mut atoms = init.atoms().clone();
    let learned = state.dt.transpose();
    for (p, &i) in used.iter().enumerate() {
        let mut col = learned.column(p).clone_owned();
        let norm = col.norm();
        if norm > 1.0 {
            col /= norm;
        }
        atoms.set_column(i, &col);
    }

    let init_used = init.atoms().select_columns(&used);
    let new_used = atoms.select_columns(&used);
    let before = frobenius_objective(trace_xx, &init_used, &b, &aat);
    let after = frobenius_objective(trace_xx, &new_used, &b, &aat);
    let mut duals = DVector::zeros(size);
    for (p, &i) in used.iter().enumerate() {
        duals[i] = state.lambda[p];
    }
    if after > before {
        log::warn!("dual dictionary update did not improve ({before} -> {after}); keeping previous atoms");
        return Ok(DualUpdate {
            dictionary: init.clone(),
            duals,
            iterations,
            gradient_norm,
        });
    }
    Ok(DualUpdate {
        dictionary: Dictionary::new(atoms)?,
        duals,
        iterations,
        gradient_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective(x: &DMatrix<f64>, d: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
        (x - d * a).norm_squared()
    }

    /// Projected gradient descent with step 1/L, run to stationarity.
    fn projected_gradient(x: &DMatrix<f64>, a: &DMatrix<f64>, init: &DMatrix<f64>) -> DMatrix<f64> {
        let aat = a * a.transpose();
        let lipschitz = 2.0 * aat.clone().symmetric_eigenvalues().max();
        let xat = x * a.transpose();
        let mut d = init.clone();
        for _ in 0..200_000 {
            let grad = (&d * &aat - &xat) * 2.0;
            let mut next = &d - grad / lipschitz;
            for mut col in next.column_iter_mut() {
                let n = col.norm();
                if n > 1.0 {
                    col /= n;
                }
            }
            let change = (&next - &d).amax();
            d = next;
            if change < 1e-14 {
                break;
            }
        }
        d
    }

    #[test]
    fn identity_codes_reproduce_short_columns() {
        let x = DMatrix::from_column_slice(3, 3, &[0.5, 0.0, 0.0, 0.1, 0.2, 0.3, 0.0, -0.4, 0.1]);
        let init = Dictionary::new(DMatrix::identity(3, 3)).unwrap();
        let up = dict_update_lagrange_dual(&x, &DMatrix::identity(3, 3), &init).unwrap();
        assert!((up.dictionary.atoms() - &x).amax() < 1e-8);
        assert!(up.duals.iter().all(|&l| (0.0..1e-8).contains(&l)));
    }

    #[test]
    fn long_column_is_scaled_to_unit_norm() {
        let x = DMatrix::from_column_slice(2, 2, &[0.3, 0.4, 0.0, 2.0]);
        let init = Dictionary::new(DMatrix::identity(2, 2)).unwrap();
        let up = dict_update_lagrange_dual(&x, &DMatrix::identity(2, 2), &init).unwrap();
        let atoms = up.dictionary.atoms();
        assert!((atoms[(0, 0)] - 0.3).abs() < 1e-8 && (atoms[(1, 0)] - 0.4).abs() < 1e-8);
        assert!(atoms[(0, 1)].abs() < 1e-8 && (atoms[(1, 1)] - 1.0).abs() < 1e-8);
        // 1-d problem: d = x / (1 + λ) with ‖d‖ = 1 gives λ = ‖x‖ − 1
        assert!((up.duals[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn matches_projected_gradient_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(6, 50, |_, _| {
                if rng.random::<f64>() < 0.5 {
                    rng.random::<f64>() * 2.0 - 1.0
                } else {
                    0.0
                }
            });
            let x = DMatrix::from_fn(4, 50, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let init = Dictionary::from_unnormalized(DMatrix::from_fn(4, 6, |_, _| rng.random::<f64>() - 0.5))
                .unwrap();
            let up = dict_update_lagrange_dual(&x, &a, &init).unwrap();
            let oracle = projected_gradient(&x, &a, init.atoms());
            let f = objective(&x, up.dictionary.atoms(), &a);
            let fo = objective(&x, &oracle, &a);
            assert!((f - fo).abs() <= 1e-5, "seed {seed}: {f} vs {fo}");
            assert!(f <= objective(&x, init.atoms(), &a) + 1e-12);
            assert!(up.duals.iter().all(|&l| l >= 0.0));
            for col in up.dictionary.atoms().column_iter() {
                assert!(col.norm() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn unused_atoms_kept_and_zero_codes_rejected() {
        let x = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let init = Dictionary::from_unnormalized(DMatrix::from_column_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0]))
            .unwrap();
        let mut a = DMatrix::zeros(3, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        let up = dict_update_lagrange_dual(&x, &a, &init).unwrap();
        assert_eq!(up.dictionary.atoms().column(2), init.atoms().column(2));
        assert!(matches!(
            dict_update_lagrange_dual(&x, &DMatrix::zeros(3, 2), &init),
            Err(Error::DegenerateCodes)
        ));
    }
}
