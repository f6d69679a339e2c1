use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{CodeMatrix, Dictionary, SparseCode};
use crate::descriptor::DenseDescriptorSet;
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSignOptions {
    /// KKT tolerance on the returned code.
    pub tol: f64,
    /// Cap on activations plus feature-sign steps.
    pub max_changes: usize,
}

impl Default for FeatureSignOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_changes: 1000,
        }
    }
}

/// Dictionary with its Gram matrix `DᵀD` precomputed, shared read-only by
/// all coding calls.
#[derive(Debug, Clone)]
pub struct Encoder {
    dict: Dictionary,
    gram: DMatrix<f64>,
    lambda: f64,
    options: FeatureSignOptions,
}

impl Encoder {
    pub fn new(dict: Dictionary, lambda: f64) -> Result<Self> {
        Self::with_options(dict, lambda, FeatureSignOptions::default())
    }

    pub fn with_options(dict: Dictionary, lambda: f64, options: FeatureSignOptions) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::validation(format!("sparsity penalty must be positive, got {lambda}")));
        }
        if options.tol.is_nan() || options.tol <= 0.0 {
            return Err(Error::validation("feature-sign tolerance must be positive"));
        }
        let gram = dict.atoms().tr_mul(dict.atoms());
        Ok(Self {
            dict,
            gram,
            lambda,
            options,
        })
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dict
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn encode(&self, x: &[f64]) -> Result<SparseCode> {
        self.encode_traced(x, None)
    }

    /// Encodes and records the objective after every feature-sign step.
    pub fn encode_traced(&self, x: &[f64], trace: Option<&mut Vec<f64>>) -> Result<SparseCode> {
        if x.len() != self.dict.dim() {
            return Err(Error::validation(format!(
                "descriptor has dimension {}, dictionary expects {}",
                x.len(),
                self.dict.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("descriptor contains non-finite values"));
        }
        if x.iter().all(|v| *v == 0.0) {
            return Ok(SparseCode::zero(self.dict.size(), self.lambda));
        }
        let xv = DVector::from_column_slice(x);
        let b = self.dict.atoms().tr_mul(&xv);
        let mut search = Search {
            gram: &self.gram,
            b: b.as_slice(),
            xx: xv.norm_squared(),
            lambda: self.lambda,
            coef: vec![0.0; self.dict.size()],
            active: Vec::new(),
        };
        search.run(&self.options, trace)
    }

    /// Codes every descriptor of a set; column order follows descriptor order.
    pub fn encode_set(&self, descs: &DenseDescriptorSet, exec: Exec) -> Result<CodeMatrix> {
        if descs.dim() != self.dict.dim() {
            return Err(Error::validation(format!(
                "descriptors have dimension {}, dictionary expects {}",
                descs.dim(),
                self.dict.dim()
            )));
        }
        let codes = exec.try_map(descs.len(), |i| {
            let x: Vec<f64> = descs.descriptor(i).iter().map(|&v| v as f64).collect();
            self.encode(&x)
        })?;
        Ok(CodeMatrix::from_codes(self.dict.size(), &codes))
    }

    /// Codes the columns of a `d`x`n` matrix.
    pub fn encode_columns(&self, x: &DMatrix<f64>, exec: Exec) -> Result<CodeMatrix> {
        let codes = exec.try_map(x.ncols(), |j| self.encode(x.column(j).as_slice()))?;
        Ok(CodeMatrix::from_codes(self.dict.size(), &codes))
    }
}

/// Solves `min_a ‖x − D a‖² + λ‖a‖₁` for one descriptor.
pub fn feature_sign_search(x: &[f64], dict: &Dictionary, lambda: f64, tol: f64) -> Result<SparseCode> {
    let options = FeatureSignOptions {
        tol,
        ..FeatureSignOptions::default()
    };
    Encoder::with_options(dict.clone(), lambda, options)?.encode(x)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Active-set state in coefficient space. With `b = Dᵀx` and `G = DᵀD`,
/// `‖x − Da‖² = xᵀx − 2bᵀa + aᵀGa` and its gradient is `2(Ga − b)`.
struct Search<'a> {
    gram: &'a DMatrix<f64>,
    b: &'a [f64],
    xx: f64,
    lambda: f64,
    coef: Vec<f64>,
    active: Vec<usize>,
}

impl Search<'_> {
    fn gradient(&self, j: usize) -> f64 {
        let ga: f64 = self.active.iter().map(|&k| self.gram[(j, k)] * self.coef[k]).sum();
        2.0 * (ga - self.b[j])
    }

    /// Objective of a candidate restricted to the active set.
    fn objective_active(&self, vals: &[f64]) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        let mut l1 = 0.0;
        for (p, &i) in self.active.iter().enumerate() {
            let vi = vals[p];
            if vi == 0.0 {
                continue;
            }
            lin += self.b[i] * vi;
            l1 += vi.abs();
            let mut row = 0.0;
            for (q, &k) in self.active.iter().enumerate() {
                row += self.gram[(i, k)] * vals[q];
            }
            quad += vi * row;
        }
        self.xx - 2.0 * lin + quad + self.lambda * l1
    }

    fn objective(&self) -> f64 {
        let vals: Vec<f64> = self.active.iter().map(|&i| self.coef[i]).collect();
        self.objective_active(&vals)
    }

    fn run(&mut self, opts: &FeatureSignOptions, mut trace: Option<&mut Vec<f64>>) -> Result<SparseCode> {
        let half_tol = 0.5 * opts.tol;
        let size = self.b.len();
        let mut in_active = vec![false; size];
        let mut theta = vec![0.0; size];
        let mut changes = 0usize;
        if let Some(t) = trace.as_deref_mut() {
            t.push(self.objective());
        }

        loop {
            // activation: most violating zero coefficient
            let mut best: Option<(usize, f64)> = None;
            for j in 0..size {
                if in_active[j] {
                    continue;
                }
                let g = self.gradient(j);
                if best.is_none_or(|(_, bg)| g.abs() > bg.abs()) {
                    best = Some((j, g));
                }
            }
            match best {
                Some((j, g)) if g.abs() > self.lambda + half_tol => {
                    theta[j] = -sign(g);
                    in_active[j] = true;
                    self.active.push(j);
                    changes += 1;
                }
                _ => return Ok(self.code()),
            }

            // feature-sign steps until the active coefficients are optimal
            loop {
                if changes > opts.max_changes {
                    return Err(Error::Convergence {
                        iterations: changes,
                        best: Box::new(self.code()),
                    });
                }
                self.feature_sign_step(&theta);
                changes += 1;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(self.objective());
                }
                let coef = &self.coef;
                self.active.retain(|&i| coef[i] != 0.0);
                for j in 0..size {
                    in_active[j] = false;
                    theta[j] = 0.0;
                }
                for &i in &self.active {
                    in_active[i] = true;
                    theta[i] = sign(self.coef[i]);
                }
                let optimal = self
                    .active
                    .iter()
                    .all(|&i| (self.gradient(i) + self.lambda * theta[i]).abs() <= half_tol);
                if optimal {
                    break;
                }
            }
        }
    }

    /// Solves the sign-constrained quadratic on the active set and moves to
    /// the best point on the segment towards it, checking every sign change.
    fn feature_sign_step(&mut self, theta: &[f64]) {
        let s = self.active.len();
        let sub = DMatrix::from_fn(s, s, |p, q| self.gram[(self.active[p], self.active[q])]);
        let rhs = DVector::from_fn(s, |p, _| {
            let i = self.active[p];
            self.b[i] - 0.5 * self.lambda * theta[i]
        });
        let target = solve_spd(sub, &rhs);
        let current: Vec<f64> = self.active.iter().map(|&i| self.coef[i]).collect();

        // candidate steps: the target itself and each zero crossing on the way
        let mut crossings: Vec<(f64, usize)> = Vec::new();
        for p in 0..s {
            let (c, t) = (current[p], target[p]);
            if c != 0.0 && sign(t) != sign(c) {
                crossings.push((c / (c - t), p));
            }
        }
        crossings.sort_by(|a, b| a.0.total_cmp(&b.0));

        let point = |step: f64, zero: Option<usize>| -> Vec<f64> {
            (0..s)
                .map(|p| {
                    if Some(p) == zero {
                        0.0
                    } else {
                        current[p] + step * (target[p] - current[p])
                    }
                })
                .collect()
        };

        // crossings come first so they win ties, which deactivates coefficients
        let mut best_vals: Option<(f64, Vec<f64>)> = None;
        for &(step, p) in &crossings {
            let vals = point(step, Some(p));
            let f = self.objective_active(&vals);
            if best_vals.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best_vals = Some((f, vals));
            }
        }
        let vals = point(1.0, None);
        let f = self.objective_active(&vals);
        if best_vals.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best_vals = Some((f, vals));
        }
        let (best_f, vals) = best_vals.expect("at least one candidate");
        if best_f <= self.objective_active(&current) {
            for (p, &i) in self.active.iter().enumerate() {
                self.coef[i] = vals[p];
            }
        }
    }

    fn code(&self) -> SparseCode {
        SparseCode {
            coefficients: self.coef.clone(),
            lambda: self.lambda,
        }
    }
}

/// Cholesky solve with growing diagonal jitter for rank-deficient active sets.
fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.solve(rhs);
    }
    let scale = m.diagonal().max().max(1.0);
    let mut jitter = 1e-12 * scale;
    loop {
        let mut shifted = m.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = shifted.cholesky() {
            return ch.solve(rhs);
        }
        jitter *= 10.0;
    }
}
