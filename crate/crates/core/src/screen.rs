//! Marginal G×E prescreening for large SNP panels.
//!
//! Each SNP gets its own pooled least-squares fit of
//! `Y ~ 1 + E + X_v + E·X_v`. The G-related coefficients are tested with
//! Wald statistics whose variance is the subject-clustered sandwich, so
//! within-subject correlation does not inflate the false-keep rate.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::datamodel::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Parallelism};

pub const DEFAULT_CUTOFF: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenReport {
    pub cutoff: f64,
    /// Smallest p-value among each SNP's `q + 1` G-related coefficients.
    pub min_p: Vec<f64>,
    pub kept: Vec<usize>,
    /// SNPs that are constant over subjects; their p-value is 1.
    pub constant: Vec<usize>,
}

impl ScreenReport {
    /// `data` restricted to the kept SNP columns, in ascending order.
    pub fn reduce(&self, data: &LongitudinalDataset) -> Result<LongitudinalDataset> {
        let gen = data.gen();
        let cols: Vec<_> = self.kept.iter().map(|&v| gen.column(v)).collect();
        let kept = if cols.is_empty() { DMatrix::zeros(data.n(), 0) } else { DMatrix::from_columns(&cols) };
        LongitudinalDataset::new(data.y().clone(), data.env_raw().to_vec(), data.q(), kept, data.observed_mask().to_vec())
    }
}

/// Two-sided Wald p-values of the G-related coefficients of one SNP, or
/// `None` when the marginal model is not identifiable.
fn snp_p_values(data: &LongitudinalDataset, v: usize, normal: &Normal) -> Option<Vec<f64>> {
    let q = data.q();
    let m = 2 * (q + 1);
    let mut rows: Vec<(usize, Vec<f64>, f64)> = Vec::with_capacity(data.total_observations());
    for i in 0..data.n() {
        let x = data.gen()[(i, v)];
        for j in 0..data.k() {
            if !data.is_observed(i, j) {
                continue;
            }
            let e = data.env_row(i, j);
            let mut w = Vec::with_capacity(m);
            w.push(1.0);
            w.extend_from_slice(e);
            w.push(x);
            w.extend(e.iter().map(|&eu| eu * x));
            rows.push((i, w, data.y()[(i, j)]));
        }
    }
    let mut xtx = DMatrix::<f64>::zeros(m, m);
    let mut xty = DVector::<f64>::zeros(m);
    for (_, w, y) in &rows {
        let w = DVector::from_column_slice(w);
        xtx.ger(1.0, &w, &w, 1.0);
        xty.axpy(*y, &w, 1.0);
    }
    let inv = xtx.clone().cholesky()?.inverse();
    let coef = &inv * &xty;
    if !coef.iter().all(|c| c.is_finite()) {
        return None;
    }

    // Meat of the sandwich: sum over subjects of (Σ_j w_ij r_ij)(…)ᵀ.
    let mut meat = DMatrix::<f64>::zeros(m, m);
    let mut score = DVector::<f64>::zeros(m);
    let mut current = rows.first().map(|r| r.0);
    for (i, w, y) in &rows {
        if Some(*i) != current {
            meat.ger(1.0, &score, &score, 1.0);
            score.fill(0.0);
            current = Some(*i);
        }
        let w = DVector::from_column_slice(w);
        let r = y - w.dot(&coef);
        score.axpy(r, &w, 1.0);
    }
    meat.ger(1.0, &score, &score, 1.0);
    let n = data.n() as f64;
    let adjust = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    let cov = &inv * meat * &inv * adjust;

    Some(
        (q + 1..m)
            .map(|c| {
                let se = cov[(c, c)].sqrt();
                if se > 0.0 && se.is_finite() {
                    let z = coef[c].abs() / se;
                    (2.0 * normal.sf(z)).clamp(0.0, 1.0)
                } else {
                    1.0
                }
            })
            .collect(),
    )
}

/// Screens every SNP of `data`; SNP `v` is kept when any of its
/// G-related p-values falls below `cutoff`.
pub fn marginal_screen(data: &LongitudinalDataset, cutoff: f64, parallelism: Parallelism) -> Result<ScreenReport> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::InvalidInput(format!("cutoff must lie in (0, 1], got {cutoff}")));
    }
    let violations = crate::datamodel::validate_dataset(data);
    if !violations.is_empty() {
        return Err(Error::InvalidDataset(violations));
    }
    let normal = Normal::standard();
    let per_snp = map_indexed(parallelism, data.p(), |v| {
        let col = data.gen().column(v);
        let first = col[0];
        if col.iter().all(|&x| x == first) {
            return None;
        }
        snp_p_values(data, v, &normal)
    });
    let mut min_p = Vec::with_capacity(data.p());
    let mut constant = Vec::new();
    for (v, p) in per_snp.into_iter().enumerate() {
        match p {
            Some(p) => min_p.push(p.into_iter().fold(1.0, f64::min)),
            None => {
                warn!("SNP {v} has no identifiable marginal effect; p-value set to 1");
                constant.push(v);
                min_p.push(1.0);
            }
        }
    }
    let kept = (0..data.p()).filter(|&v| min_p[v] < cutoff).collect();
    Ok(ScreenReport { cutoff, min_p, kept, constant })
}
