//! Penalized QIF fit: LASSO initialization, damped Newton–Raphson on the
//! local quadratic approximation of the penalty, and selection thresholding.
//!
//! Each step solves `(V + nH) Δ = −(P + nHβ)` with `P`, `V` the
//! frozen-moment derivatives of the mean-form `Qₙ`, so the objective the
//! iteration descends is `U(β) = Qₙ(β) + n·penalty(β)`.
//!
//! Penalized coordinates that reach zero are pinned there and dropped from
//! the Newton system. Their local-quadratic weight is of order `λ/ε`, so the
//! undamped iteration would keep them at zero anyway.

use std::collections::BTreeSet;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::WorkingCorrelation;
use crate::datamodel::{expand_design, CoefLayout, ExpandedDesign, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::penalty::{assemble_h, is_pinned, penalty_value, PenaltyKind, PenaltySpec};
use crate::qif::QifSystem;

/// How the LASSO initializer picks its penalty weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum LassoLambda {
    /// Bisection on the path for at most `n/2` active coordinates.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoOptions {
    pub lambda: LassoLambda,
    pub max_sweeps: usize,
    /// Stop when every coordinate moves less than this (in `‖w_j‖/√N` units).
    pub tol: f64,
    pub bisection_steps: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self { lambda: LassoLambda::Auto, max_sweeps: 5000, tol: 1e-7, bisection_steps: 30 }
    }
}

/// Where the moment matrix `Ω̄ₙ` is evaluated during the Newton iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentUpdate {
    /// Re-evaluated at every iterate.
    #[default]
    EveryIteration,
    /// Evaluated once at the starting point, so the QIF part is a fixed
    /// quadratic. Much cheaper per iteration.
    Initial,
}

impl std::str::FromStr for MomentUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "every-iteration" | "every" | "live" => Ok(MomentUpdate::EveryIteration),
            "initial" | "frozen" => Ok(MomentUpdate::Initial),
            other => Err(Error::InvalidInput(format!("unknown moment update {other:?}; expected every-iteration or initial"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence on `mean |β⁽ᵍ⁺¹⁾ − β⁽ᵍ⁾|`.
    pub tol: f64,
    /// Selection threshold on `|β̂|`.
    pub threshold: f64,
    /// Penalized coordinates (or group norms) below this are pinned at zero.
    pub zero_tol: f64,
    pub max_halvings: usize,
    pub moments: MomentUpdate,
    pub lasso: LassoOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-3, threshold: 1e-3, zero_tol: 1e-6, max_halvings: 30, moments: MomentUpdate::default(), lasso: LassoOptions::default() }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be positive".into()));
        }
        if !(self.tol > 0.0) || !(self.threshold >= 0.0) || !(self.zero_tol >= 0.0) {
            return Err(Error::InvalidInput("tolerances must be non-negative (tol positive)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Penalized objective after the step, with the moment matrix of the
    /// iteration's starting point.
    pub objective: f64,
    pub step: f64,
    pub mean_change: f64,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: PenaltyKind,
    pub structure: WorkingCorrelation,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub beta_hat: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_q: f64,
    pub final_objective: f64,
    pub selected_main: BTreeSet<usize>,
    pub selected_inter: BTreeSet<(usize, usize)>,
    pub trace: Vec<TraceEntry>,
}

impl FitResult {
    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta_hat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub beta: DVector<f64>,
    pub lambda: f64,
    pub sweeps: usize,
    pub converged: bool,
}

impl LassoFit {
    pub fn active_count(&self, layout: &CoefLayout) -> usize {
        (layout.unpenalized().end..layout.d()).filter(|&j| self.beta[j] != 0.0).count()
    }
}

/// Cyclic coordinate descent for `(1/2N)‖y − Wβ‖² + λ Σ_pen |β_j|`.
struct CoordinateDescent<'a> {
    design: &'a ExpandedDesign,
    col_sq: Vec<f64>,
    n_unpen: usize,
}

impl<'a> CoordinateDescent<'a> {
    fn new(design: &'a ExpandedDesign) -> Self {
        let rows = design.rows();
        let nf = rows.nrows() as f64;
        let col_sq = (0..rows.ncols()).map(|j| rows.column(j).norm_squared() / nf).collect();
        Self { design, col_sq, n_unpen: design.layout().unpenalized().end }
    }

    /// One coordinate update; returns the scaled change.
    #[inline]
    fn update(&self, j: usize, lambda: f64, beta: &mut DVector<f64>, resid: &mut DVector<f64>) -> f64 {
        let c = self.col_sq[j];
        if c == 0.0 {
            return 0.0;
        }
        let col = self.design.rows().column(j);
        let nf = resid.len() as f64;
        let z = col.dot(resid) / nf + c * beta[j];
        let new = if j < self.n_unpen { z / c } else { soft_threshold(z, lambda) / c };
        let delta = new - beta[j];
        if delta != 0.0 {
            resid.axpy(-delta, &col, 1.0);
            beta[j] = new;
        }
        delta.abs() * c.sqrt()
    }

    fn sweep(&self, coords: impl Iterator<Item = usize>, lambda: f64, beta: &mut DVector<f64>, resid: &mut DVector<f64>) -> f64 {
        coords.fold(0.0, |m, j| m.max(self.update(j, lambda, beta, resid)))
    }

    /// Solves at `lambda` from a warm start, iterating on the active set
    /// between full sweeps.
    fn solve(&self, lambda: f64, beta: &mut DVector<f64>, options: &LassoOptions) -> (usize, bool) {
        let d = beta.len();
        let mut resid = self.design.response() - self.design.predict(beta);
        let mut sweeps = 0;
        while sweeps < options.max_sweeps {
            let full = self.sweep(0..d, lambda, beta, &mut resid);
            sweeps += 1;
            if full < options.tol {
                return (sweeps, true);
            }
            let active: Vec<usize> = (0..d).filter(|&j| j < self.n_unpen || beta[j] != 0.0).collect();
            while sweeps < options.max_sweeps {
                let change = self.sweep(active.iter().copied(), lambda, beta, &mut resid);
                sweeps += 1;
                if change < options.tol {
                    break;
                }
            }
        }
        (sweeps, false)
    }

    /// Smallest `λ` at which every penalized coordinate is zero, given the
    /// unpenalized least-squares fit.
    fn lambda_max(&self, options: &LassoOptions) -> (f64, DVector<f64>) {
        let d = self.design.d();
        let mut beta = DVector::zeros(d);
        let mut resid = self.design.response().clone();
        for _ in 0..options.max_sweeps {
            if self.sweep(0..self.n_unpen, 0.0, &mut beta, &mut resid) < options.tol {
                break;
            }
        }
        let nf = resid.len() as f64;
        let rows = self.design.rows();
        let lmax = (self.n_unpen..d).map(|j| rows.column(j).dot(&resid).abs() / nf).fold(0.0, f64::max);
        (lmax, beta)
    }
}

#[inline]
fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// LASSO starting value under working independence.
pub fn init_lasso(design: &ExpandedDesign, options: &LassoOptions) -> Result<LassoFit> {
    let cd = CoordinateDescent::new(design);
    let layout = design.layout();
    match options.lambda {
        LassoLambda::Fixed(lambda) => {
            if !(lambda >= 0.0) {
                return Err(Error::InvalidInput(format!("LASSO lambda must be non-negative, got {lambda}")));
            }
            let mut beta = DVector::zeros(design.d());
            let (sweeps, converged) = cd.solve(lambda, &mut beta, options);
            if !converged {
                warn!("LASSO initializer stopped after {sweeps} sweeps without converging");
            }
            Ok(LassoFit { beta, lambda, sweeps, converged })
        }
        LassoLambda::Auto => {
            let target = (design.n_subjects() / 2).max(1);
            let (lmax, beta0) = cd.lambda_max(options);
            let count = |b: &DVector<f64>| (layout.unpenalized().end..layout.d()).filter(|&j| b[j] != 0.0).count();
            if !(lmax > 0.0) {
                return Ok(LassoFit { beta: beta0, lambda: 0.0, sweeps: 0, converged: true });
            }
            // `hi` always satisfies the target, `lo` may not.
            let (mut lo, mut hi) = ((lmax * 1e-4).ln(), lmax.ln());
            let mut best = LassoFit { beta: beta0.clone(), lambda: lmax, sweeps: 0, converged: true };
            let mut warm = beta0;
            let mut total = 0;
            if layout.d() - layout.unpenalized().end <= target {
                let mut lo_fit = DVector::zeros(design.d());
                let (sweeps, converged) = cd.solve(lo.exp(), &mut lo_fit, options);
                return Ok(LassoFit { beta: lo_fit, lambda: lo.exp(), sweeps, converged });
            }
            for _ in 0..options.bisection_steps {
                let mid = 0.5 * (lo + hi);
                let mut beta = warm.clone();
                let (s, c) = cd.solve(mid.exp(), &mut beta, options);
                total += s;
                let active = count(&beta);
                if active <= target {
                    hi = mid;
                    warm = beta.clone();
                    best = LassoFit { beta, lambda: mid.exp(), sweeps: total, converged: c };
                    if active == target {
                        break;
                    }
                } else {
                    lo = mid;
                }
            }
            best.sweeps = total;
            if !best.converged {
                warn!("LASSO initializer stopped at the sweep limit");
            }
            Ok(best)
        }
    }
}

/// Selected main effects and interactions: `|β̂| > threshold`.
pub fn threshold_select(beta: &DVector<f64>, layout: &CoefLayout, threshold: f64) -> (BTreeSet<usize>, BTreeSet<(usize, usize)>) {
    let mut main = BTreeSet::new();
    let mut inter = BTreeSet::new();
    for v in 0..layout.p {
        if beta[layout.main_index(v)].abs() > threshold {
            main.insert(v);
        }
        for u in 0..layout.q {
            if beta[layout.interaction_index(v, u)].abs() > threshold {
                inter.insert((v, u));
            }
        }
    }
    (main, inter)
}

/// Solves `A x = b` for symmetric PSD `A`, with a tiny ridge if needed.
fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, iteration: usize) -> Result<DVector<f64>> {
    let dim = a.nrows();
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let ridge = 1e-10 * a.trace().abs().max(f64::MIN_POSITIVE) / dim.max(1) as f64;
    let mut r = a;
    for i in 0..dim {
        r[(i, i)] += ridge;
    }
    debug!("Newton system needed a ridge of {ridge:e} at iteration {iteration}");
    match r.cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(Error::SingularSystem { iteration }),
    }
}

/// Local quadratic model of `Qₙ` around the current iterate.
struct LocalModel {
    q_value: f64,
    p: DVector<f64>,
    v: DMatrix<f64>,
}

/// `Qₙ` with the moment matrix fixed at `base`: an exact quadratic in `β`.
struct FrozenMoments {
    base: DVector<f64>,
    /// Coordinates the stored derivatives cover.
    cover: Vec<usize>,
    /// Position of each coordinate in `cover`.
    slot: Vec<Option<usize>>,
    q_value: f64,
    p: DVector<f64>,
    v: DMatrix<f64>,
}

impl FrozenMoments {
    fn new(system: &QifSystem, base: &DVector<f64>, cover: Vec<usize>) -> Result<Self> {
        let eval = system.evaluate(base, &cover)?;
        let mut slot = vec![None; base.len()];
        for (c, &j) in cover.iter().enumerate() {
            slot[j] = Some(c);
        }
        Ok(Self { base: base.clone(), cover, slot, q_value: eval.q_value, p: eval.p, v: eval.v })
    }

    fn local(&self, beta: &DVector<f64>, active: &[usize]) -> LocalModel {
        let diff = DVector::from_iterator(self.cover.len(), self.cover.iter().map(|&j| beta[j] - self.base[j]));
        let v_diff = &self.v * &diff;
        let q_value = (self.q_value + self.p.dot(&diff) + 0.5 * diff.dot(&v_diff)).max(0.0);
        let grad = &self.p + v_diff;
        let idx: Vec<usize> = active.iter().map(|&j| self.slot[j].expect("active set shrinks")).collect();
        LocalModel { q_value, p: grad.select_rows(&idx), v: self.v.select_rows(&idx).select_columns(&idx) }
    }
}

/// Multiplier `n` on the penalty relative to the mean-form `Qₙ`.
pub fn penalty_weight(system: &QifSystem) -> f64 {
    system.design().n_subjects() as f64
}

/// Penalized objective `Qₙ(β) + n·penalty(β)`.
pub fn penalized_objective(system: &QifSystem, spec: &PenaltySpec, beta: &DVector<f64>) -> Result<f64> {
    Ok(system.q_value(beta)? + penalty_weight(system) * penalty_value(beta, &system.layout(), spec))
}

/// Damped Newton–Raphson for the penalized QIF from `beta0`.
pub fn newton_fit(system: &QifSystem, spec: &PenaltySpec, beta0: &DVector<f64>, options: &FitOptions) -> Result<FitResult> {
    spec.validate()?;
    options.validate()?;
    let layout = system.layout();
    let d = layout.d();
    if beta0.len() != d {
        return Err(Error::DimensionMismatch { what: "starting vector", expected: d, found: beta0.len() });
    }
    let weight = penalty_weight(system);
    let mut beta = beta0.clone();
    let mut pinned = vec![false; d];
    let repin = |beta: &mut DVector<f64>, pinned: &mut Vec<bool>| {
        for j in layout.unpenalized().end..d {
            if !pinned[j] && is_pinned(beta, j, &layout, spec, options.zero_tol) {
                pinned[j] = true;
            }
        }
        for j in 0..d {
            if pinned[j] {
                beta[j] = 0.0;
            }
        }
    };
    repin(&mut beta, &mut pinned);
    let frozen = match options.moments {
        MomentUpdate::Initial => Some(FrozenMoments::new(system, beta0, (0..d).filter(|&j| !pinned[j]).collect())?),
        MomentUpdate::EveryIteration => None,
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let active: Vec<usize> = (0..d).filter(|&j| !pinned[j]).collect();
        let model = match &frozen {
            Some(f) => f.local(&beta, &active),
            None => {
                let e = system.evaluate(&beta, &active)?;
                LocalModel { q_value: e.q_value, p: e.p, v: e.v }
            }
        };
        let h_full = assemble_h(&beta, &layout, spec)? * weight;
        let u0 = model.q_value + weight * penalty_value(&beta, &layout, spec);
        if !u0.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iterations });
        }
        let beta_a = DVector::from_iterator(active.len(), active.iter().map(|&j| beta[j]));
        let h = DVector::from_iterator(active.len(), active.iter().map(|&j| h_full[j]));
        let mut system_mat = model.v.clone();
        for (i, &w) in h.iter().enumerate() {
            system_mat[(i, i)] += w;
        }
        let rhs = -(&model.p + h.component_mul(&beta_a));
        let delta = solve_spd(system_mat, &rhs, iterations)?;
        if !delta.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteObjective { iteration: iterations });
        }

        // Halve until the local objective does not increase.
        let lin = model.p.dot(&delta);
        let quad = delta.dot(&(&model.v * &delta));
        let mut step = 1.0;
        let mut candidate;
        let mut objective;
        let mut halvings = 0;
        loop {
            candidate = beta.clone();
            for (c, &j) in active.iter().enumerate() {
                candidate[j] += step * delta[c];
            }
            let q_new = (model.q_value + step * lin + 0.5 * step * step * quad).max(0.0);
            objective = q_new + weight * penalty_value(&candidate, &layout, spec);
            if objective <= u0 + 1e-12 * u0.abs().max(1.0) || halvings >= options.max_halvings {
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        if !objective.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iterations });
        }
        repin(&mut candidate, &mut pinned);
        let mean_change = (&candidate - &beta).abs().sum() / d as f64;
        beta = candidate;
        trace.push(TraceEntry { objective, step, mean_change, active: active.len() });
        debug!("iteration {iterations}: U = {objective:.6e}, step = {step}, mean |Δβ| = {mean_change:.3e}, active = {}", active.len());
        if mean_change < options.tol {
            converged = true;
            break;
        }
    }

    let final_q = system.q_value(&beta)?;
    let final_objective = final_q + weight * penalty_value(&beta, &layout, spec);
    let (selected_main, selected_inter) = threshold_select(&beta, &layout, options.threshold);
    Ok(FitResult {
        kind: spec.kind,
        structure: system.structure(),
        lambda1: spec.lambda1,
        lambda2: spec.lambda2,
        gamma: spec.gamma,
        beta_hat: beta.as_slice().to_vec(),
        iterations,
        converged,
        final_q,
        final_objective,
        selected_main,
        selected_inter,
        trace,
    })
}

/// Expands, initializes by LASSO and fits in one call.
pub fn fit_dataset(
    data: &LongitudinalDataset,
    structure: WorkingCorrelation,
    spec: &PenaltySpec,
    options: &FitOptions,
) -> Result<FitResult> {
    let design = Arc::new(expand_design(data)?);
    let beta0 = init_lasso(&design, &options.lasso)?.beta;
    let system = QifSystem::new(design, structure)?;
    newton_fit(&system, spec, &beta0, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qif::QifEvaluation;
    use crate::simgen::{draw_coefficients, draw_dataset, stream_rng, ScenarioConfig, Stream, TrueCoefficients};

    fn toy(n: usize, k: usize, p: usize, q: usize, n_true: usize, noise_sd: f64, seed: u64) -> (LongitudinalDataset, TrueCoefficients) {
        let cfg = ScenarioConfig { n, k, p, q, n_true, noise_sd, seed, ..Default::default() };
        let coefs = draw_coefficients(&cfg, &mut stream_rng(seed, 0, Stream::Truth)).unwrap();
        let data = draw_dataset(&cfg, &coefs, &mut stream_rng(seed, 0, Stream::Train)).unwrap();
        (data, coefs)
    }

    fn system(data: &LongitudinalDataset, s: WorkingCorrelation) -> QifSystem {
        QifSystem::new(Arc::new(expand_design(data).unwrap()), s).unwrap()
    }

    fn ols(design: &ExpandedDesign) -> DVector<f64> {
        let w = design.rows();
        let wt = w.transpose();
        (&wt * w).cholesky().unwrap().solve(&(&wt * design.response()))
    }

    #[test]
    fn soft_threshold_closed_form() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }

    #[test]
    fn lasso_without_penalty_is_ols() {
        let (data, _) = toy(40, 3, 3, 1, 3, 1.0, 1);
        let design = expand_design(&data).unwrap();
        let opts = LassoOptions { lambda: LassoLambda::Fixed(0.0), tol: 1e-12, max_sweeps: 100_000, ..Default::default() };
        let fit = init_lasso(&design, &opts).unwrap();
        let oracle = ols(&design);
        assert!((&fit.beta - &oracle).norm() / oracle.norm() < 1e-6);
    }

    #[test]
    fn lasso_large_lambda_zeroes_penalized_block() {
        let (data, _) = toy(40, 3, 3, 1, 3, 1.0, 2);
        let design = expand_design(&data).unwrap();
        let fit = init_lasso(&design, &LassoOptions { lambda: LassoLambda::Fixed(1e6), ..Default::default() }).unwrap();
        let layout = design.layout();
        assert_eq!(fit.active_count(&layout), 0);
        // The unpenalized coordinates carry the least-squares fit on [1, E].
        let w = design.rows().columns(0, layout.unpenalized().end).into_owned();
        let wt = w.transpose();
        let sub = (&wt * &w).cholesky().unwrap().solve(&(&wt * design.response()));
        assert!((fit.beta.rows(0, sub.len()) - sub).amax() < 1e-6);
    }

    #[test]
    fn lasso_single_predictor_soft_threshold() {
        // y = 2x with centered x and no environment: intercept stays 0.
        let n = 10;
        let x: Vec<f64> = (0..n).map(|i| i as f64 - 4.5).collect();
        let y = DMatrix::from_fn(n, 1, |i, _| 2.0 * x[i]);
        let gen = DMatrix::from_fn(n, 1, |i, _| x[i]);
        let data = LongitudinalDataset::balanced(y, vec![], 0, gen).unwrap();
        let design = expand_design(&data).unwrap();
        let sxx: f64 = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sxy = 2.0 * sxx;
        let lambda = 0.5 * sxy;
        let opts = LassoOptions { lambda: LassoLambda::Fixed(lambda), tol: 1e-14, ..Default::default() };
        let fit = init_lasso(&design, &opts).unwrap();
        assert!((fit.beta[1] - (sxy - lambda) / sxx).abs() < 1e-10);
        assert!(fit.beta[0].abs() < 1e-10);
    }

    #[test]
    fn auto_lasso_respects_half_n() {
        let (data, _) = toy(30, 3, 40, 2, 6, 1.0, 3);
        let design = expand_design(&data).unwrap();
        let fit = init_lasso(&design, &LassoOptions::default()).unwrap();
        let active = fit.active_count(&design.layout());
        assert!(active <= 15 && active > 0, "{active}");
    }

    #[test]
    fn one_undamped_step_reaches_ols() {
        let (data, _) = toy(60, 3, 2, 1, 2, 1.0, 4);
        let sys = system(&data, WorkingCorrelation::Independence);
        let spec = PenaltySpec::new(PenaltyKind::SparseGroup, 0.0, 0.0).unwrap();
        let opts = FitOptions { max_iter: 1, ..Default::default() };
        let fit = newton_fit(&sys, &spec, &DVector::zeros(sys.layout().d()), &opts).unwrap();
        assert_eq!(fit.trace[0].step, 1.0);
        let oracle = ols(sys.design());
        assert!((fit.beta() - &oracle).norm() / oracle.norm() < 1e-8);
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let (data, _) = toy(60, 3, 2, 1, 2, 1.0, 5);
        let sys = system(&data, WorkingCorrelation::Independence);
        let spec = PenaltySpec::new(PenaltyKind::SparseGroup, 0.0, 0.0).unwrap();
        let start = ols(sys.design());
        let fit = newton_fit(&sys, &spec, &start, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!(fit.trace[0].mean_change < 1e-3);
    }

    #[test]
    fn surrogate_objective_never_increases() {
        let (data, _) = toy(80, 4, 10, 2, 6, 1.0, 6);
        let sys = system(&data, WorkingCorrelation::Exchangeable);
        let spec = PenaltySpec::new(PenaltyKind::SparseGroup, 0.1, 0.1).unwrap();
        let beta0 = init_lasso(sys.design(), &LassoOptions::default()).unwrap().beta;
        let mut beta = beta0;
        for _ in 0..15 {
            let u0 = penalized_objective(&sys, &spec, &beta).unwrap();
            let fit = newton_fit(&sys, &spec, &beta, &FitOptions { max_iter: 1, ..Default::default() }).unwrap();
            assert!(fit.trace[0].objective <= u0 + 1e-12 * u0.max(1.0));
            beta = fit.beta();
        }
    }

    #[test]
    fn nesting_of_penalty_kinds_is_exact() {
        let (data, _) = toy(60, 3, 12, 2, 6, 1.0, 7);
        let design = Arc::new(expand_design(&data).unwrap());
        let sys = QifSystem::new(design.clone(), WorkingCorrelation::Exchangeable).unwrap();
        let beta0 = init_lasso(&design, &LassoOptions::default()).unwrap().beta;
        let opts = FitOptions::default();
        let fit = |kind, l1, l2| newton_fit(&sys, &PenaltySpec::new(kind, l1, l2).unwrap(), &beta0, &opts).unwrap();
        let sg = fit(PenaltyKind::SparseGroup, 0.15, 0.0);
        let g = fit(PenaltyKind::Group, 0.15, 0.7);
        assert_eq!(sg.beta_hat, g.beta_hat);
        let sg = fit(PenaltyKind::SparseGroup, 0.0, 0.12);
        let i = fit(PenaltyKind::Individual, 0.9, 0.12);
        assert_eq!(sg.beta_hat, i.beta_hat);
    }

    #[test]
    fn large_effects_are_recovered_without_bias() {
        let (data, mut truth) = toy(150, 4, 4, 1, 4, 0.0, 8);
        let layout = data.layout();
        // Push every true effect far past the knees.
        for b in truth.beta.iter_mut().filter(|b| **b != 0.0) {
            *b *= 10.0;
        }
        let cfg = ScenarioConfig { n: 150, k: 4, p: 4, q: 1, n_true: 4, noise_sd: 0.0, seed: 8, ..Default::default() };
        let data = draw_dataset(&cfg, &truth, &mut stream_rng(8, 0, Stream::Train)).unwrap();
        let sys = system(&data, WorkingCorrelation::Exchangeable);
        let spec = PenaltySpec::new(PenaltyKind::SparseGroup, 0.01, 0.01).unwrap();
        let beta0 = init_lasso(sys.design(), &LassoOptions::default()).unwrap().beta;
        let opts = FitOptions { tol: 1e-9, ..Default::default() };
        let fit = newton_fit(&sys, &spec, &beta0, &opts).unwrap();
        assert!((fit.beta() - truth.beta_vector()).amax() < 1e-3, "{:?}", fit.beta_hat);
        let (main, inter) = threshold_select(&fit.beta(), &layout, 1e-3);
        assert_eq!(main, truth.main);
        assert_eq!(inter, truth.inter);
    }

    #[test]
    fn unpenalized_coordinates_are_not_shrunk() {
        let (data, _) = toy(120, 4, 6, 2, 5, 0.0, 9);
        let sys = system(&data, WorkingCorrelation::Exchangeable);
        let layout = sys.layout();
        let spec = PenaltySpec::new(PenaltyKind::SparseGroup, 0.2, 0.2).unwrap();
        let beta0 = init_lasso(sys.design(), &LassoOptions::default()).unwrap().beta;
        let fit = newton_fit(&sys, &spec, &beta0, &FitOptions { tol: 1e-12, ..Default::default() }).unwrap();
        let unpen: Vec<usize> = layout.unpenalized().collect();
        // Refit the unpenalized block alone with the rest held fixed.
        let mut refit = fit.beta();
        for u in unpen.iter().copied() {
            refit[u] = 0.0;
        }
        for _ in 0..50 {
            let e = QifEvaluation::compute(&refit, sys.design(), WorkingCorrelation::Exchangeable).unwrap();
            let v = e.v_mat.select_rows(&unpen).select_columns(&unpen);
            let p = e.p_vec.select_rows(&unpen);
            let step = v.cholesky().unwrap().solve(&(-p));
            for (c, &u) in unpen.iter().enumerate() {
                refit[u] += step[c];
            }
            if step.amax() < 1e-13 {
                break;
            }
        }
        for &u in &unpen {
            assert!((refit[u] - fit.beta_hat[u]).abs() < 1e-6, "{u}: {} vs {}", refit[u], fit.beta_hat[u]);
        }
    }

    #[test]
    fn live_moments_reach_a_stationary_point() {
        let (data, _) = toy(150, 3, 3, 1, 3, 1.0, 10);
        let sys = system(&data, WorkingCorrelation::Exchangeable);
        let layout = sys.layout();
        let spec = PenaltySpec::new(PenaltyKind::SparseGroup, 0.05, 0.05).unwrap();
        let beta0 = init_lasso(sys.design(), &LassoOptions::default()).unwrap().beta;
        let opts = FitOptions { tol: 1e-12, moments: MomentUpdate::EveryIteration, ..Default::default() };
        let fit = newton_fit(&sys, &spec, &beta0, &opts).unwrap();
        assert!(fit.converged, "{} iterations", fit.iterations);
        let beta = fit.beta();
        let e = QifEvaluation::compute(&beta, sys.design(), WorkingCorrelation::Exchangeable).unwrap();
        let h = assemble_h(&beta, &layout, &spec).unwrap() * penalty_weight(&sys);
        for j in (0..layout.d()).filter(|&j| beta[j] != 0.0) {
            let r = e.p_vec[j] + h[j] * beta[j];
            assert!(r.abs() < 1e-8, "coordinate {j}: {r}");
        }
        let frozen = newton_fit(&sys, &spec, &beta0, &FitOptions { moments: MomentUpdate::Initial, ..opts }).unwrap();
        assert!(frozen.converged);
        assert!((frozen.beta() - &beta).amax() < 0.1);
    }

    #[test]
    fn threshold_examples() {
        let layout = CoefLayout::new(2, 2);
        let zero = DVector::zeros(layout.d());
        let (m, i) = threshold_select(&zero, &layout, 1e-3);
        assert!(m.is_empty() && i.is_empty());
        let mut beta = DVector::zeros(layout.d());
        let g = layout.group(1);
        beta[g.start] = 0.5;
        beta[g.start + 2] = 0.002;
        let (m, i) = threshold_select(&beta, &layout, 1e-3);
        assert_eq!(m, BTreeSet::from([1]));
        assert_eq!(i, BTreeSet::from([(1, 1)]));
        beta[g.start + 1] = 1e-9;
        let (_, i) = threshold_select(&beta, &layout, 0.0);
        assert_eq!(i, BTreeSet::from([(1, 0), (1, 1)]));
    }

    #[test]
    fn wrong_start_length_is_rejected() {
        let (data, _) = toy(20, 3, 2, 1, 2, 1.0, 10);
        let sys = system(&data, WorkingCorrelation::Independence);
        let spec = PenaltySpec::new(PenaltyKind::SparseGroup, 0.1, 0.1).unwrap();
        assert!(matches!(
            newton_fit(&sys, &spec, &DVector::zeros(3), &FitOptions::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
