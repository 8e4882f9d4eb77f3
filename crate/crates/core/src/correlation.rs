//! Working-correlation basis matrices and the unbalanced-cluster selection
//! transform.
//!
//! The inverse working correlation is approximated by a linear combination
//! `Σ_t b_t M_t` of fixed symmetric basis matrices. For clusters with missing
//! time points the bases are built at the full size `k` and then restricted
//! to the kept rows and columns.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable,
    Ar1,
}

impl WorkingCorrelation {
    pub const ALL: [WorkingCorrelation; 3] =
        [WorkingCorrelation::Independence, WorkingCorrelation::Exchangeable, WorkingCorrelation::Ar1];

    /// Number of basis matrices `m`.
    pub fn basis_count(self) -> usize {
        match self {
            WorkingCorrelation::Independence => 1,
            WorkingCorrelation::Exchangeable => 2,
            WorkingCorrelation::Ar1 => 3,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            WorkingCorrelation::Independence => "ind",
            WorkingCorrelation::Exchangeable => "exch",
            WorkingCorrelation::Ar1 => "ar1",
        }
    }
}

impl fmt::Display for WorkingCorrelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkingCorrelation::Independence => "independence",
            WorkingCorrelation::Exchangeable => "exchangeable",
            WorkingCorrelation::Ar1 => "ar1",
        })
    }
}

impl FromStr for WorkingCorrelation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(WorkingCorrelation::Independence),
            "exchangeable" | "exch" => Ok(WorkingCorrelation::Exchangeable),
            "ar1" | "ar-1" => Ok(WorkingCorrelation::Ar1),
            other => Err(Error::InvalidInput(format!("unknown correlation structure `{other}`"))),
        }
    }
}

/// Basis matrices `M_1..M_m` of size `k × k`.
///
/// `M_1 = I`. Exchangeable adds the all-ones-off-diagonal matrix. AR-1 adds
/// the first sub/super-diagonal band and the corner matrix with ones at
/// `(1,1)` and `(k,k)`; together they span the tridiagonal AR-1 inverse.
pub fn basis_matrices(structure: WorkingCorrelation, k: usize) -> Result<Vec<DMatrix<f64>>> {
    if k == 0 {
        return Err(Error::InvalidInput("cluster size k must be at least 1".into()));
    }
    let mut out = vec![DMatrix::identity(k, k)];
    match structure {
        WorkingCorrelation::Independence => {}
        WorkingCorrelation::Exchangeable => {
            out.push(DMatrix::from_fn(k, k, |a, b| if a == b { 0.0 } else { 1.0 }));
        }
        WorkingCorrelation::Ar1 => {
            out.push(DMatrix::from_fn(k, k, |a, b| if a.abs_diff(b) == 1 { 1.0 } else { 0.0 }));
            let mut corner = DMatrix::zeros(k, k);
            corner[(0, 0)] = 1.0;
            corner[(k - 1, k - 1)] = 1.0;
            out.push(corner);
        }
    }
    Ok(out)
}

/// Selection transform `S_i`: the ascending list of observed time points
/// (0-based) out of `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTransform {
    subject: usize,
    k: usize,
    kept: Vec<usize>,
}

impl ClusterTransform {
    pub fn new(subject: usize, k: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::InvalidInput(format!("subject {subject} keeps no time points")));
        }
        if let Some(&bad) = kept.iter().find(|&&j| j >= k) {
            return Err(Error::InvalidInput(format!("kept time point {bad} outside 0..{k}")));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("kept time points must be strictly ascending".into()));
        }
        Ok(Self { subject, k, kept })
    }

    pub(crate) fn new_unchecked(subject: usize, k: usize, kept: Vec<usize>) -> Self {
        Self { subject, k, kept }
    }

    pub fn identity(subject: usize, k: usize) -> Self {
        Self { subject, k, kept: (0..k).collect() }
    }

    pub fn subject(&self) -> usize {
        self.subject
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }
    /// `k_i`.
    pub fn len(&self) -> usize {
        self.kept.len()
    }
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
    pub fn is_full(&self) -> bool {
        self.kept.len() == self.k
    }

    /// `S_i v`: the kept entries of a length-`k` vector.
    pub fn restrict_vector(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.k {
            return Err(Error::DimensionMismatch { what: "transform input vector", expected: self.k, found: v.len() });
        }
        Ok(DVector::from_iterator(self.kept.len(), self.kept.iter().map(|&j| v[j])))
    }

    /// `S_i A S_iᵀ`: the kept rows and columns of a `k × k` matrix.
    pub fn restrict_matrix(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.nrows() != self.k || a.ncols() != self.k {
            return Err(Error::DimensionMismatch { what: "transform input matrix", expected: self.k, found: a.nrows() });
        }
        let kept = &self.kept;
        Ok(DMatrix::from_fn(kept.len(), kept.len(), |r, c| a[(kept[r], kept[c])]))
    }

    /// Explicit `k_i × k` selection matrix (rows of the identity), for checks.
    pub fn selection_matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.kept.len(), self.k);
        for (r, &j) in self.kept.iter().enumerate() {
            s[(r, j)] = 1.0;
        }
        s
    }
}
