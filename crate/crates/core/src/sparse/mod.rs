//! Sparse coding over a learned dictionary.
//!
//! Codes minimize `‖x − D a‖² + λ‖a‖₁` (feature-sign search); dictionaries
//! minimize `‖X − D A‖²_F` subject to unit-bounded columns (Lagrange dual),
//! and [`learn_dictionary`] alternates the two.

mod dual;
mod feature_sign;
mod learn;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::container::{self, Kind, Reader, Writer};
use crate::error::{Error, Result};

pub use dual::{dict_update_lagrange_dual, DualUpdate};
pub use feature_sign::{feature_sign_search, Encoder, FeatureSignOptions};
pub use learn::{learn_dictionary, sample_pool, LearnSchedule, LearnedDictionary};

/// Sparsity penalty for coding and dictionary learning.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Slack allowed on the unit column-norm constraint.
pub const NORM_SLACK: f64 = 1e-9;

/// `d`x`D` codebook whose columns (visual words) have norm at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    pub fn new(atoms: DMatrix<f64>) -> Result<Self> {
        if atoms.ncols() == 0 || atoms.nrows() == 0 {
            return Err(Error::validation("dictionary must have at least one atom"));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("dictionary contains non-finite entries"));
        }
        for (i, col) in atoms.column_iter().enumerate() {
            let n = col.norm();
            if n > 1.0 + NORM_SLACK {
                return Err(Error::validation(format!(
                    "atom {i} has norm {n} > 1"
                )));
            }
        }
        Ok(Self { atoms })
    }

    /// Scales every column to unit norm; zero columns are rejected.
    pub fn from_unnormalized(mut atoms: DMatrix<f64>) -> Result<Self> {
        for (i, mut col) in atoms.column_iter_mut().enumerate() {
            let n = col.norm();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::validation(format!("atom {i} cannot be normalized")));
            }
            col /= n;
        }
        Self::new(atoms)
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    /// Descriptor dimension `d`.
    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    /// Number of visual words `D`.
    pub fn size(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn to_bytes(&self, lambda: f64) -> Vec<u8> {
        let mut w = Writer::new(Kind::Dictionary);
        w.u64(self.dim() as u64)
            .u64(self.size() as u64)
            .f64(lambda)
            .f64s(self.atoms.as_slice());
        w.finish()
    }

    /// Returns the dictionary and the λ it was stored with.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, f64)> {
        let mut r = Reader::new(bytes, Kind::Dictionary)?;
        let d = r.len()?;
        let size = r.len()?;
        let lambda = r.f64()?;
        let data = r.f64s(d * size)?;
        r.finish()?;
        Ok((Self::new(DMatrix::from_vec(d, size, data))?, lambda))
    }

    /// Writes the binary container plus a `.json` sidecar holding `meta`.
    pub fn save(&self, path: &Path, lambda: f64, meta: &serde_json::Value) -> Result<()> {
        container::write_file(path, &self.to_bytes(lambda))?;
        let sidecar = path.with_extension("json");
        let body = serde_json::to_string_pretty(meta).expect("json value serializes");
        container::write_file(&sidecar, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<(Self, f64)> {
        Self::from_bytes(&container::read_file(path)?)
    }

    /// Sum over columns of `‖x − D a‖² + λ‖a‖₁`.
    pub fn objective(&self, x: &DMatrix<f64>, codes: &CodeMatrix, lambda: f64) -> f64 {
        let residual = x - &self.atoms * codes.matrix();
        residual.norm_squared() + lambda * codes.matrix().iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// One descriptor's code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub coefficients: Vec<f64>,
    pub lambda: f64,
}

impl SparseCode {
    pub fn zero(size: usize, lambda: f64) -> Self {
        Self {
            coefficients: vec![0.0; size],
            lambda,
        }
    }

    pub fn nnz(&self) -> usize {
        self.coefficients.iter().filter(|v| **v != 0.0).count()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.coefficients)
    }

    /// `‖x − D a‖² + λ‖a‖₁` for this code.
    pub fn objective(&self, x: &[f64], dict: &Dictionary) -> f64 {
        let a = self.to_vector();
        let r = DVector::from_column_slice(x) - dict.atoms() * a;
        r.norm_squared() + self.lambda * self.coefficients.iter().map(|v| v.abs()).sum::<f64>()
    }
}

/// `D`x`N` codes; column `i` is the code of descriptor `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    codes: DMatrix<f64>,
}

impl CodeMatrix {
    pub fn new(codes: DMatrix<f64>) -> Self {
        Self { codes }
    }

    pub fn from_codes(size: usize, codes: &[SparseCode]) -> Self {
        let mut m = DMatrix::zeros(size, codes.len());
        for (j, c) in codes.iter().enumerate() {
            m.column_mut(j).copy_from_slice(&c.coefficients);
        }
        Self { codes: m }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.codes
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.codes
    }

    pub fn size(&self) -> usize {
        self.codes.nrows()
    }

    pub fn len(&self) -> usize {
        self.codes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.ncols() == 0
    }

    /// Sparse column storage: per column a count, then (row, value) pairs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(Kind::Codes);
        w.u64(self.size() as u64).u64(self.len() as u64);
        for col in self.codes.column_iter() {
            let nz: Vec<(u32, f64)> = col
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect();
            w.u32(nz.len() as u32);
            for (i, v) in nz {
                w.u32(i).f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, Kind::Codes)?;
        let size = r.len()?;
        let n = r.len()?;
        let mut codes = DMatrix::zeros(size, n);
        for j in 0..n {
            let nnz = r.u32()? as usize;
            for _ in 0..nnz {
                let i = r.u32()? as usize;
                let v = r.f64()?;
                if i >= size {
                    return Err(Error::Format(format!("code row {i} out of range {size}")));
                }
                codes[(i, j)] = v;
            }
        }
        r.finish()?;
        Ok(Self { codes })
    }
}
