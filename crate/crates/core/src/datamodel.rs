//! Longitudinal G×E data and its expansion into the regression design.
//!
//! Coefficients are laid out as `(α₀, α₁..α_q, η₁, …, η_p)` where each
//! `η_v = (γ_v, h_1v, …, h_qv)` holds the main effect of genetic factor `v`
//! followed by its interactions with the `q` environment factors, so
//! `d = 1 + q + p(q + 1)`.

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::ClusterTransform;
use crate::error::{Error, Result};

/// Subjects × time points of response, environment and genetic factors.
///
/// Genetic factors are time-invariant (`n × p`); environment factors are
/// stored per time point (`n × k × q`). Missing time points are marked in
/// `observed`; values in unobserved cells are ignored everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    n: usize,
    k: usize,
    q: usize,
    p: usize,
    y: DMatrix<f64>,
    env: Vec<f64>,
    gen: DMatrix<f64>,
    observed: Vec<bool>,
}

/// One broken dataset invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    NoObservedTimePoints { subject: usize },
    NonFiniteResponse { subject: usize, time: usize },
    NonFiniteEnvironment { subject: usize, time: usize, factor: usize },
    NonFiniteGenetic { subject: usize, factor: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::NoObservedTimePoints { subject } => {
                write!(f, "subject {subject} has no observed time points")
            }
            Violation::NonFiniteResponse { subject, time } => {
                write!(f, "response at subject {subject}, time {time} is not finite")
            }
            Violation::NonFiniteEnvironment { subject, time, factor } => write!(
                f,
                "environment factor {factor} at subject {subject}, time {time} is not finite"
            ),
            Violation::NonFiniteGenetic { subject, factor } => {
                write!(f, "genetic factor {factor} of subject {subject} is not finite")
            }
        }
    }
}

impl LongitudinalDataset {
    /// Builds a dataset from raw arrays.
    ///
    /// `env` is row-major over `(subject, time, factor)`; `observed` is
    /// row-major over `(subject, time)`. Response and environment values at
    /// unobserved cells are reset to 0. Only shapes are checked here; use
    /// [`validate_dataset`] for value-level invariants.
    pub fn new(
        mut y: DMatrix<f64>,
        mut env: Vec<f64>,
        q: usize,
        gen: DMatrix<f64>,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let (n, k) = y.shape();
        if n == 0 || k == 0 {
            return Err(Error::InvalidInput("dataset needs at least one subject and one time point".into()));
        }
        if env.len() != n * k * q {
            return Err(Error::DimensionMismatch { what: "environment tensor", expected: n * k * q, found: env.len() });
        }
        if gen.nrows() != n {
            return Err(Error::DimensionMismatch { what: "genetic matrix rows", expected: n, found: gen.nrows() });
        }
        if observed.len() != n * k {
            return Err(Error::DimensionMismatch { what: "observation mask", expected: n * k, found: observed.len() });
        }
        for (cell, _) in observed.iter().enumerate().filter(|(_, o)| !**o) {
            y[(cell / k, cell % k)] = 0.0;
            env[cell * q..(cell + 1) * q].fill(0.0);
        }
        let p = gen.ncols();
        Ok(Self { n, k, q, p, y, env, gen, observed })
    }

    /// Fully observed dataset.
    pub fn balanced(y: DMatrix<f64>, env: Vec<f64>, q: usize, gen: DMatrix<f64>) -> Result<Self> {
        let len = y.len();
        Self::new(y, env, q, gen, vec![true; len])
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn q(&self) -> usize {
        self.q
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn layout(&self) -> CoefLayout {
        CoefLayout { p: self.p, q: self.q }
    }
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }
    pub fn y_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.y
    }
    pub fn gen(&self) -> &DMatrix<f64> {
        &self.gen
    }
    pub fn env(&self, i: usize, j: usize, u: usize) -> f64 {
        self.env[(i * self.k + j) * self.q + u]
    }
    pub fn env_row(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.k + j) * self.q;
        &self.env[start..start + self.q]
    }
    pub fn env_raw(&self) -> &[f64] {
        &self.env
    }
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.k + j]
    }
    pub fn observed_mask(&self) -> &[bool] {
        &self.observed
    }

    /// Number of observed time points of subject `i` (the cluster size k_i).
    pub fn cluster_size(&self, i: usize) -> usize {
        self.observed[i * self.k..(i + 1) * self.k].iter().filter(|&&o| o).count()
    }

    pub fn total_observations(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn is_balanced(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }

    /// Selection transform (kept time points) of subject `i`.
    pub fn cluster(&self, i: usize) -> ClusterTransform {
        let kept = (0..self.k).filter(|&j| self.is_observed(i, j)).collect();
        ClusterTransform::new_unchecked(i, self.k, kept)
    }

    /// Copy restricted to the listed subjects, in the given order.
    pub fn subset(&self, subjects: &[usize]) -> Self {
        let (k, q) = (self.k, self.q);
        let y = DMatrix::from_fn(subjects.len(), k, |r, j| self.y[(subjects[r], j)]);
        let gen = DMatrix::from_fn(subjects.len(), self.p, |r, v| self.gen[(subjects[r], v)]);
        let mut env = Vec::with_capacity(subjects.len() * k * q);
        let mut observed = Vec::with_capacity(subjects.len() * k);
        for &i in subjects {
            env.extend_from_slice(&self.env[i * k * q..(i + 1) * k * q]);
            observed.extend_from_slice(&self.observed[i * k..(i + 1) * k]);
        }
        Self { n: subjects.len(), k, q, p: self.p, y, env, gen, observed }
    }

    /// Same data with a different observation mask.
    pub fn with_mask(&self, observed: Vec<bool>) -> Result<Self> {
        Self::new(self.y.clone(), self.env.clone(), self.q, self.gen.clone(), observed)
    }

    /// Standardizes every environment and genetic column to mean 0 and
    /// unit variance over the observed cells. Constant columns are only
    /// centered.
    pub fn standardized(&self) -> Self {
        let mut out = self.clone();
        for u in 0..self.q {
            let vals: Vec<f64> = (0..self.n)
                .flat_map(|i| (0..self.k).map(move |j| (i, j)))
                .filter(|&(i, j)| self.is_observed(i, j))
                .map(|(i, j)| self.env(i, j, u))
                .collect();
            let (mean, sd) = mean_sd(&vals);
            for i in 0..self.n {
                for j in 0..self.k {
                    let cell = &mut out.env[(i * self.k + j) * self.q + u];
                    *cell = scale(*cell, mean, sd);
                }
            }
        }
        for v in 0..self.p {
            let vals: Vec<f64> = self.gen.column(v).iter().copied().collect();
            let (mean, sd) = mean_sd(&vals);
            for i in 0..self.n {
                out.gen[(i, v)] = scale(out.gen[(i, v)], mean, sd);
            }
        }
        out
    }
}

fn mean_sd(vals: &[f64]) -> (f64, f64) {
    let n = vals.len().max(1) as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn scale(x: f64, mean: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        (x - mean) / sd
    } else {
        x - mean
    }
}

/// Lists every broken invariant; never aborts.
pub fn validate_dataset(data: &LongitudinalDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for i in 0..data.n {
        if data.cluster_size(i) == 0 {
            out.push(Violation::NoObservedTimePoints { subject: i });
        }
        for j in 0..data.k {
            if !data.is_observed(i, j) {
                continue;
            }
            if !data.y[(i, j)].is_finite() {
                out.push(Violation::NonFiniteResponse { subject: i, time: j });
            }
            for u in 0..data.q {
                if !data.env(i, j, u).is_finite() {
                    out.push(Violation::NonFiniteEnvironment { subject: i, time: j, factor: u });
                }
            }
        }
        for v in 0..data.p {
            if !data.gen[(i, v)].is_finite() {
                out.push(Violation::NonFiniteGenetic { subject: i, factor: v });
            }
        }
    }
    out
}

/// Index map of the coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefLayout {
    pub p: usize,
    pub q: usize,
}

impl CoefLayout {
    pub fn new(p: usize, q: usize) -> Self {
        Self { p, q }
    }

    pub fn d(&self) -> usize {
        1 + self.q + self.p * (self.q + 1)
    }

    pub fn group_size(&self) -> usize {
        self.q + 1
    }

    /// Intercept and environment coefficients; never shrunk.
    pub fn unpenalized(&self) -> Range<usize> {
        0..1 + self.q
    }

    /// Contiguous block `(γ_v, h_1v, …, h_qv)` of genetic factor `v` (0-based).
    pub fn group(&self, v: usize) -> Range<usize> {
        let start = 1 + self.q + v * (self.q + 1);
        start..start + self.q + 1
    }

    pub fn main_index(&self, v: usize) -> usize {
        self.group(v).start
    }

    /// Index of the interaction of factor `v` with environment factor `u` (0-based).
    pub fn interaction_index(&self, v: usize, u: usize) -> usize {
        self.group(v).start + 1 + u
    }

    /// Group owning coefficient `j`, or `None` for unpenalized indices.
    pub fn group_of(&self, j: usize) -> Option<usize> {
        (j > self.q).then(|| (j - 1 - self.q) / (self.q + 1))
    }
}

/// Regression design: one row `W_ij` per observed cell, grouped by subject.
#[derive(Debug, Clone)]
pub struct ExpandedDesign {
    layout: CoefLayout,
    n: usize,
    k: usize,
    rows: DMatrix<f64>,
    response: DVector<f64>,
    offsets: Vec<usize>,
    clusters: Vec<ClusterTransform>,
}

impl ExpandedDesign {
    pub fn layout(&self) -> CoefLayout {
        self.layout
    }
    pub fn d(&self) -> usize {
        self.layout.d()
    }
    pub fn n_subjects(&self) -> usize {
        self.n
    }
    /// Maximum number of time points per subject.
    pub fn k(&self) -> usize {
        self.k
    }
    pub fn n_obs(&self) -> usize {
        self.rows.nrows()
    }
    /// Stacked `N_obs × d` design.
    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }
    pub fn response(&self) -> &DVector<f64> {
        &self.response
    }
    /// Row range of subject `i` in [`rows`](Self::rows).
    pub fn subject_rows(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
    pub fn cluster(&self, i: usize) -> &ClusterTransform {
        &self.clusters[i]
    }
    pub fn clusters(&self) -> &[ClusterTransform] {
        &self.clusters
    }
    pub fn is_balanced(&self) -> bool {
        self.clusters.iter().all(ClusterTransform::is_full)
    }

    /// `W_i⋆`, the observed rows of subject `i`.
    pub fn subject_design(&self, i: usize) -> DMatrix<f64> {
        let r = self.subject_rows(i);
        self.rows.rows(r.start, r.len()).into_owned()
    }

    pub fn subject_response(&self, i: usize) -> DVector<f64> {
        let r = self.subject_rows(i);
        self.response.rows(r.start, r.len()).into_owned()
    }

    /// Linear predictor `W β` for every observed cell.
    pub fn predict(&self, beta: &DVector<f64>) -> DVector<f64> {
        sparse_gemv(&self.rows, beta)
    }
}

/// `rows · beta`, skipping zero coefficients.
pub(crate) fn sparse_gemv(rows: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(rows.nrows());
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            out.axpy(b, &rows.column(j), 1.0);
        }
    }
    out
}

/// Expands `(Y, E, X)` into `W_ij = (1, E_ij, X_i1·(1, E_ij), …, X_ip·(1, E_ij))`.
pub fn expand_design(data: &LongitudinalDataset) -> Result<ExpandedDesign> {
    let violations = validate_dataset(data);
    if !violations.is_empty() {
        return Err(Error::InvalidDataset(violations));
    }
    let layout = data.layout();
    let (q, p, d) = (layout.q, layout.p, layout.d());
    let n_obs = data.total_observations();
    let mut rows = DMatrix::zeros(n_obs, d);
    let mut response = DVector::zeros(n_obs);
    let mut offsets = Vec::with_capacity(data.n + 1);
    let mut clusters = Vec::with_capacity(data.n);
    let mut r = 0;
    for i in 0..data.n {
        offsets.push(r);
        for j in 0..data.k {
            if !data.is_observed(i, j) {
                continue;
            }
            let e = data.env_row(i, j);
            rows[(r, 0)] = 1.0;
            for u in 0..q {
                rows[(r, 1 + u)] = e[u];
            }
            for v in 0..p {
                let x = data.gen[(i, v)];
                let g = layout.main_index(v);
                rows[(r, g)] = x;
                for u in 0..q {
                    rows[(r, g + 1 + u)] = e[u] * x;
                }
            }
            response[r] = data.y[(i, j)];
            r += 1;
        }
        clusters.push(data.cluster(i));
    }
    offsets.push(r);
    Ok(ExpandedDesign { layout, n: data.n, k: data.k, rows, response, offsets, clusters })
}
