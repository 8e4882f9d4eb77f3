//! Minimax concave penalty, group norms and the diagonal local-quadratic
//! weights `H` for the sparse-group, group and individual penalties.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::{CoefLayout, ExpandedDesign};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    SparseGroup,
    Group,
    Individual,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 3] = [PenaltyKind::SparseGroup, PenaltyKind::Group, PenaltyKind::Individual];

    pub fn uses_group_term(self) -> bool {
        matches!(self, PenaltyKind::SparseGroup | PenaltyKind::Group)
    }

    pub fn uses_individual_term(self) -> bool {
        matches!(self, PenaltyKind::SparseGroup | PenaltyKind::Individual)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            PenaltyKind::SparseGroup => "sg",
            PenaltyKind::Group => "g",
            PenaltyKind::Individual => "i",
        }
    }
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::SparseGroup => "sparse-group",
            PenaltyKind::Group => "group",
            PenaltyKind::Individual => "individual",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sparse-group" | "sparse_group" | "sg" => Ok(PenaltyKind::SparseGroup),
            "group" | "g" => Ok(PenaltyKind::Group),
            "individual" | "i" => Ok(PenaltyKind::Individual),
            other => Err(Error::InvalidInput(format!("unknown penalty kind `{other}`"))),
        }
    }
}

/// Norm used for `‖η_v‖` in the group term.
#[derive(Debug, Clone, Default)]
pub enum GroupMetric {
    #[default]
    Euclidean,
    /// `sqrt(η_vᵀ Σ_v η_v)` with `Σ_v` the empirical second moment of the
    /// group's design columns.
    Empirical(Arc<Vec<DMatrix<f64>>>),
}

impl GroupMetric {
    pub fn empirical(design: &ExpandedDesign) -> Self {
        let layout = design.layout();
        let rows = design.rows();
        let n_obs = rows.nrows().max(1) as f64;
        let sigmas = (0..layout.p)
            .map(|v| {
                let g = layout.group(v);
                let block = rows.columns(g.start, g.len());
                block.transpose() * block / n_obs
            })
            .collect();
        GroupMetric::Empirical(Arc::new(sigmas))
    }

    fn norm(&self, v: usize, eta: &[f64]) -> f64 {
        match self {
            GroupMetric::Euclidean => group_norm(eta),
            GroupMetric::Empirical(sigmas) => {
                let e = DVector::from_column_slice(eta);
                (e.dot(&(&sigmas[v] * &e))).max(0.0).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub metric: GroupMetric,
}

pub const DEFAULT_GAMMA: f64 = 3.0;
pub const DEFAULT_EPSILON: f64 = 1e-6;

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, lambda1: f64, lambda2: f64) -> Result<Self> {
        Self::with_gamma(kind, lambda1, lambda2, DEFAULT_GAMMA)
    }

    pub fn with_gamma(kind: PenaltyKind, lambda1: f64, lambda2: f64, gamma: f64) -> Result<Self> {
        let spec = Self { kind, lambda1, lambda2, gamma, epsilon: DEFAULT_EPSILON, metric: GroupMetric::Euclidean };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 1.0) {
            return Err(Error::InvalidInput(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        if !(self.lambda1 >= 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::InvalidInput("tuning parameters must be non-negative".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidInput("epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Group tuning `√(q+1)·λ₁`, or 0 when the kind has no group term.
    pub fn group_lambda(&self, layout: &CoefLayout) -> f64 {
        if self.kind.uses_group_term() {
            (layout.group_size() as f64).sqrt() * self.lambda1
        } else {
            0.0
        }
    }

    /// Individual tuning `λ₂`, or 0 when the kind has no individual term.
    pub fn individual_lambda(&self) -> f64 {
        if self.kind.uses_individual_term() {
            self.lambda2
        } else {
            0.0
        }
    }
}

fn check_nonneg(t: f64) -> Result<()> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("penalty argument must be non-negative, got {t}")))
    }
}

/// `ρ(t; λ, γ) = λ ∫₀ᵗ (1 − x/(γλ))₊ dx`.
pub fn mcp(t: f64, lambda: f64, gamma: f64) -> Result<f64> {
    check_nonneg(t)?;
    Ok(mcp_value(t, lambda, gamma))
}

/// `ρ′(t; λ, γ) = (λ − t/γ)·1{t ≤ γλ}`.
pub fn mcp_deriv(t: f64, lambda: f64, gamma: f64) -> Result<f64> {
    check_nonneg(t)?;
    Ok(mcp_slope(t, lambda, gamma))
}

#[inline]
pub(crate) fn mcp_value(t: f64, lambda: f64, gamma: f64) -> f64 {
    if t <= gamma * lambda {
        lambda * t - t * t / (2.0 * gamma)
    } else {
        gamma * lambda * lambda / 2.0
    }
}

#[inline]
pub(crate) fn mcp_slope(t: f64, lambda: f64, gamma: f64) -> f64 {
    if t <= gamma * lambda {
        lambda - t / gamma
    } else {
        0.0
    }
}

pub fn group_norm(eta: &[f64]) -> f64 {
    eta.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Diagonal of `H` at `beta`.
pub fn assemble_h(beta: &DVector<f64>, layout: &CoefLayout, spec: &PenaltySpec) -> Result<DVector<f64>> {
    if beta.len() != layout.d() {
        return Err(Error::DimensionMismatch { what: "coefficient vector", expected: layout.d(), found: beta.len() });
    }
    let mut h = DVector::zeros(layout.d());
    let lg = spec.group_lambda(layout);
    let li = spec.individual_lambda();
    for v in 0..layout.p {
        let g = layout.group(v);
        let eta = &beta.as_slice()[g.clone()];
        let group_term = if spec.kind.uses_group_term() {
            let norm = spec.metric.norm(v, eta);
            mcp_slope(norm, lg, spec.gamma) / (spec.epsilon + norm)
        } else {
            0.0
        };
        for j in g {
            let mut w = group_term;
            if spec.kind.uses_individual_term() {
                let a = beta[j].abs();
                w += mcp_slope(a, li, spec.gamma) / (spec.epsilon + a);
            }
            h[j] = w;
        }
    }
    Ok(h)
}

/// `Σ_v ρ(‖η_v‖; √(q+1)λ₁, γ) + Σ_{v,u} ρ(|η_vu|; λ₂, γ)`, restricted to
/// the terms the kind uses.
pub fn penalty_value(beta: &DVector<f64>, layout: &CoefLayout, spec: &PenaltySpec) -> f64 {
    let lg = spec.group_lambda(layout);
    let li = spec.individual_lambda();
    let mut total = 0.0;
    for v in 0..layout.p {
        let eta = &beta.as_slice()[layout.group(v)];
        if spec.kind.uses_group_term() {
            total += mcp_value(spec.metric.norm(v, eta), lg, spec.gamma);
        }
        if spec.kind.uses_individual_term() {
            total += eta.iter().map(|x| mcp_value(x.abs(), li, spec.gamma)).sum::<f64>();
        }
    }
    total
}

/// True when the penalty pins coefficient `j` at zero: the local-quadratic
/// weight of a zero coordinate is of order `λ/ε`, so once it reaches zero it
/// never leaves.
pub(crate) fn is_pinned(beta: &DVector<f64>, j: usize, layout: &CoefLayout, spec: &PenaltySpec, tol: f64) -> bool {
    let Some(v) = layout.group_of(j) else { return false };
    if spec.individual_lambda() > 0.0 && beta[j].abs() < tol {
        return true;
    }
    spec.group_lambda(layout) > 0.0 && spec.metric.norm(v, &beta.as_slice()[layout.group(v)]) < tol
}
