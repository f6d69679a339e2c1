//! Independent reference implementations used by the integration tests.
//! None of these call into the library's numerical routines.
#![allow(dead_code)]

use lccrc::pyramid::ImageDescriptor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; avoids pulling in a distributions crate for tests.
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gaussian(rng))
}

pub fn normalize_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for min ‖x − D a‖² + λ‖a‖₁, run until no
/// coordinate moves by more than `tol`.
pub fn lasso_cd(d: &DMatrix<f64>, x: &[f64], lambda: f64, tol: f64) -> Vec<f64> {
    let (rows, n) = d.shape();
    let col = |j: usize| (0..rows).map(move |i| d[(i, j)]);
    let norms: Vec<f64> = (0..n).map(|j| col(j).map(|v| v * v).sum()).collect();
    let mut a = vec![0.0; n];
    let mut r: Vec<f64> = x.to_vec();
    for _ in 0..1_000_000 {
        let mut delta: f64 = 0.0;
        for j in 0..n {
            let rho: f64 = col(j).zip(&r).map(|(v, ri)| v * ri).sum::<f64>() + norms[j] * a[j];
            let new = soft(rho, lambda / 2.0) / norms[j];
            let step = new - a[j];
            if step != 0.0 {
                for (i, ri) in r.iter_mut().enumerate() {
                    *ri -= step * d[(i, j)];
                }
                a[j] = new;
            }
            delta = delta.max(step.abs());
        }
        if delta <= tol {
            break;
        }
    }
    a
}

pub fn lasso_objective(d: &DMatrix<f64>, x: &[f64], a: &[f64], lambda: f64) -> f64 {
    let (rows, n) = d.shape();
    let mut err = 0.0;
    for i in 0..rows {
        let recon: f64 = (0..n).map(|j| d[(i, j)] * a[j]).sum();
        err += (x[i] - recon).powi(2);
    }
    err + lambda * a.iter().map(|v| v.abs()).sum::<f64>()
}

/// Largest violation of the lasso optimality conditions, with gradient 2Dᵀ(Da − x).
pub fn lasso_kkt(d: &DMatrix<f64>, x: &[f64], a: &[f64], lambda: f64) -> f64 {
    let (rows, n) = d.shape();
    let r: Vec<f64> = (0..rows)
        .map(|i| (0..n).map(|j| d[(i, j)] * a[j]).sum::<f64>() - x[i])
        .collect();
    (0..n)
        .map(|j| {
            let g = 2.0 * (0..rows).map(|i| d[(i, j)] * r[i]).sum::<f64>();
            if a[j] != 0.0 {
                (g + lambda * a[j].signum()).abs()
            } else {
                (g.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Gauss-Jordan elimination with partial pivoting on a dense copy.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, p);
        let pivot = m[c][c];
        for v in m[c].iter_mut() {
            *v /= pivot;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in c..=n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n]).collect()
}

/// Ridge coefficients by forming and eliminating the normal equations.
pub fn ridge_oracle(y: &DMatrix<f64>, z: &[f64], lambda: f64) -> Vec<f64> {
    let (rows, k) = y.shape();
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| {
                    (0..rows).map(|i| y[(i, a)] * y[(i, b)]).sum::<f64>() + if a == b { lambda } else { 0.0 }
                })
                .collect()
        })
        .collect();
    let rhs: Vec<f64> = (0..k).map(|a| (0..rows).map(|i| y[(i, a)] * z[i]).sum()).collect();
    gauss_solve(&gram, &rhs)
}

/// Indices of the `k` columns of `cols` nearest to `z`, by a full sort on
/// (squared distance, index).
pub fn knn_oracle(cols: &DMatrix<f64>, z: &[f64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..cols.ncols())
        .map(|j| {
            let d: f64 = (0..cols.nrows()).map(|i| (cols[(i, j)] - z[i]).powi(2)).sum();
            (d, j)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Dense LC-CRC scores from scratch: normalize the pond, find neighbours,
/// ridge-code each test column, and sum per-level minimum class residuals.
pub fn lccrc_oracle(
    train: &[(&ImageDescriptor, usize)],
    classes: usize,
    test: &ImageDescriptor,
    k: usize,
    lambda: f64,
) -> Vec<f64> {
    let mut pond: Vec<(Vec<f64>, usize)> = Vec::new();
    for (desc, class) in train {
        for col in desc.pooled().column_iter() {
            if col.iter().any(|v| *v != 0.0) {
                pond.push((unit(col.iter().copied().collect()), *class));
            }
        }
    }
    let dim = test.code_size();
    let pond_mat = DMatrix::from_fn(dim, pond.len(), |i, j| pond[j].0[i]);
    let mut per_level: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for (m, col) in test.pooled().column_iter().enumerate() {
        let entry = per_level.entry(test.levels()[m]).or_insert_with(|| vec![f64::INFINITY; classes]);
        if col.iter().all(|v| *v == 0.0) {
            continue;
        }
        let z = unit(col.iter().copied().collect());
        let nn = knn_oracle(&pond_mat, &z, k.min(pond.len()));
        let y = DMatrix::from_fn(dim, nn.len(), |i, j| pond[nn[j]].0[i]);
        let a = ridge_oracle(&y, &z, lambda);
        for (c, best) in entry.iter_mut().enumerate() {
            let mut r = z.clone();
            let mut any = false;
            for (t, &j) in nn.iter().enumerate() {
                if pond[j].1 == c {
                    any = true;
                    for i in 0..dim {
                        r[i] -= a[t] * pond[j].0[i];
                    }
                }
            }
            let e = if any { r.iter().map(|v| v * v).sum::<f64>().sqrt() } else { 1.0 };
            *best = best.min(e);
        }
    }
    let mut scores = vec![0.0; classes];
    for best in per_level.values() {
        for (s, b) in scores.iter_mut().zip(best) {
            *s += if b.is_finite() { *b } else { 1.0 };
        }
    }
    scores
}

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}
