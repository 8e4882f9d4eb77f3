//! Choosing `(λ₁, λ₂)` on a grid by validation-set or subject-level
//! cross-validation, and the TP/FP/MSE metrics used to score fits.

use std::collections::BTreeSet;
use std::sync::Arc;

use log::{debug, warn};
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::WorkingCorrelation;
use crate::datamodel::{expand_design, ExpandedDesign, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Parallelism};
use crate::penalty::{PenaltyKind, PenaltySpec, DEFAULT_GAMMA};
use crate::qif::QifSystem;
use crate::simgen::TrueCoefficients;
use crate::solver::{init_lasso, newton_fit, FitOptions, FitResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    pub gamma: f64,
}

impl Default for TuningGrid {
    fn default() -> Self {
        let axis = log_spaced(0.01, 0.5, 10);
        Self { lambda1_values: axis.clone(), lambda2_values: axis, gamma: DEFAULT_GAMMA }
    }
}

/// `count` values from `lo` to `hi`, evenly spaced on the log scale.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
        }
    }
}

impl TuningGrid {
    pub fn new(lambda1_values: Vec<f64>, lambda2_values: Vec<f64>, gamma: f64) -> Result<Self> {
        let grid = Self { lambda1_values, lambda2_values, gamma };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("lambda1", &self.lambda1_values), ("lambda2", &self.lambda2_values)] {
            if axis.is_empty() {
                return Err(Error::InvalidInput(format!("{name} grid is empty")));
            }
            if axis.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} grid values must be positive and finite")));
            }
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidInput(format!("{name} grid must be strictly ascending")));
            }
        }
        if !(self.gamma > 1.0) {
            return Err(Error::InvalidInput(format!("gamma must exceed 1, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Cells for one penalty kind, grouped into rows of fixed `λ₁` with
    /// `λ₂` descending. The axis a kind ignores collapses to zero.
    pub fn rows(&self, kind: PenaltyKind) -> Vec<Vec<(f64, f64)>> {
        let descending = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
        match kind {
            PenaltyKind::Group => vec![self.lambda1_values.iter().rev().map(|&l1| (l1, 0.0)).collect()],
            PenaltyKind::Individual => vec![descending(&self.lambda2_values).into_iter().map(|l2| (0.0, l2)).collect()],
            PenaltyKind::SparseGroup => self
                .lambda1_values
                .iter()
                .map(|&l1| descending(&self.lambda2_values).into_iter().map(|l2| (l1, l2)).collect())
                .collect(),
        }
    }

    pub fn spec(&self, kind: PenaltyKind, lambda1: f64, lambda2: f64) -> Result<PenaltySpec> {
        PenaltySpec::with_gamma(kind, lambda1, lambda2, self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub fit: FitOptions,
    /// Start each cell from the previous cell's estimate along the `λ₂`
    /// row instead of from the shared LASSO estimate.
    pub warm_start: bool,
    pub parallelism: Parallelism,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self { fit: FitOptions::default(), warm_start: false, parallelism: Parallelism::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `None` when the cell errored or did not converge.
    pub mse: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub kind: PenaltyKind,
    pub structure: WorkingCorrelation,
    pub cells: Vec<CellReport>,
    pub best_lambda1: f64,
    pub best_lambda2: f64,
    pub best_mse: f64,
}

#[derive(Debug, Clone)]
pub struct Tuned {
    pub report: TuningReport,
    pub fit: FitResult,
}

/// Mean squared prediction error over the observed cells.
pub fn predict_mse(fit: &FitResult, data: &LongitudinalDataset) -> Result<f64> {
    let design = expand_design(data)?;
    design_mse(&fit.beta(), &design)
}

/// [`predict_mse`] on an already expanded design.
pub fn design_mse(beta: &DVector<f64>, design: &ExpandedDesign) -> Result<f64> {
    if beta.len() != design.d() {
        return Err(Error::DimensionMismatch { what: "coefficient vector", expected: design.d(), found: beta.len() });
    }
    let resid = design.response() - design.predict(beta);
    Ok(resid.norm_squared() / design.n_obs() as f64)
}

/// Index of the best usable cell: least MSE, ties to smaller `λ₁`, then
/// smaller `λ₂`.
fn argmin_cell(cells: &[CellReport]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.mse.map(|m| (i, m, c.lambda1, c.lambda2)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.3.total_cmp(&b.3)))
        .map(|t| t.0)
}

fn failure_summary(cells: &[CellReport]) -> String {
    cells
        .iter()
        .map(|c| match &c.error {
            Some(e) => format!("({:.4}, {:.4}): {e}", c.lambda1, c.lambda2),
            None => format!("({:.4}, {:.4}): no convergence after {} iterations", c.lambda1, c.lambda2, c.iterations),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Fits every cell of one row, in row order.
fn fit_row(
    system: &QifSystem,
    beta0: &DVector<f64>,
    row: &[(f64, f64)],
    grid: &TuningGrid,
    kind: PenaltyKind,
    options: &TuneOptions,
) -> Vec<(CellReport, Option<FitResult>)> {
    let mut start = beta0.clone();
    let mut out = Vec::with_capacity(row.len());
    for &(l1, l2) in row {
        let fitted = grid.spec(kind, l1, l2).and_then(|spec| newton_fit(system, &spec, &start, &options.fit));
        match fitted {
            Ok(fit) => {
                if options.warm_start {
                    start = fit.beta();
                }
                let cell = CellReport { lambda1: l1, lambda2: l2, mse: None, converged: fit.converged, iterations: fit.iterations, error: None };
                out.push((cell, Some(fit)));
            }
            Err(e) => {
                debug!("cell ({l1}, {l2}) failed: {e}");
                let cell = CellReport { lambda1: l1, lambda2: l2, mse: None, converged: false, iterations: 0, error: Some(e.to_string()) };
                out.push((cell, None));
            }
        }
    }
    out
}

/// Fits all cells of `grid` for one kind on a prepared system.
fn fit_grid(
    system: &QifSystem,
    beta0: &DVector<f64>,
    grid: &TuningGrid,
    kind: PenaltyKind,
    options: &TuneOptions,
) -> Result<Vec<(CellReport, Option<FitResult>)>> {
    grid.validate()?;
    let rows = grid.rows(kind);
    let fitted = map_indexed(options.parallelism, rows.len(), |r| fit_row(system, beta0, &rows[r], grid, kind, options));
    Ok(fitted.into_iter().flatten().collect())
}

/// Validation-set tuning on a prepared training system and start.
pub fn grid_tune_system(
    system: &QifSystem,
    beta0: &DVector<f64>,
    validate: &ExpandedDesign,
    grid: &TuningGrid,
    kind: PenaltyKind,
    options: &TuneOptions,
) -> Result<Tuned> {
    let mut cells = Vec::new();
    let mut fits = Vec::new();
    for (mut cell, fit) in fit_grid(system, beta0, grid, kind, options)? {
        if let Some(f) = &fit {
            if f.converged {
                cell.mse = Some(design_mse(&f.beta(), validate)?);
            }
        }
        cells.push(cell);
        fits.push(fit);
    }
    let best = argmin_cell(&cells).ok_or_else(|| Error::TuningFailed(failure_summary(&cells)))?;
    let fit = fits[best].take().expect("usable cell has a fit");
    let report = TuningReport {
        kind,
        structure: system.structure(),
        best_lambda1: cells[best].lambda1,
        best_lambda2: cells[best].lambda2,
        best_mse: cells[best].mse.expect("usable cell has an mse"),
        cells,
    };
    Ok(Tuned { report, fit })
}

/// Fits every grid cell on `train`, scores prediction MSE on `validate`
/// and returns the best cell.
pub fn grid_tune(
    train: &LongitudinalDataset,
    validate: &LongitudinalDataset,
    grid: &TuningGrid,
    kind: PenaltyKind,
    structure: WorkingCorrelation,
    options: &TuneOptions,
) -> Result<Tuned> {
    let design = Arc::new(expand_design(train)?);
    let validate = expand_design(validate)?;
    if validate.d() != design.d() {
        return Err(Error::DimensionMismatch { what: "validation design", expected: design.d(), found: validate.d() });
    }
    let beta0 = init_lasso(&design, &options.fit.lasso)?.beta;
    let system = QifSystem::new(design, structure)?;
    grid_tune_system(&system, &beta0, &validate, grid, kind, options)
}

/// Balanced random assignment of `n` subjects to `folds` folds.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::InvalidInput(format!("cross-validation needs at least 2 folds, got {folds}")));
    }
    if folds > n {
        return Err(Error::InvalidInput(format!("{folds} folds leave some fold without subjects (n = {n})")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = rank % folds;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub kind: PenaltyKind,
    pub structure: WorkingCorrelation,
    pub folds: usize,
    /// Fold of each subject.
    pub assignment: Vec<usize>,
    /// Per cell, held-out MSE averaged over folds; `None` if any fold failed.
    pub cells: Vec<CellReport>,
    pub fold_mse: Vec<Vec<Option<f64>>>,
    pub best_lambda1: f64,
    pub best_lambda2: f64,
    pub best_mse: f64,
}

/// Subject-level cross-validation with a seeded balanced fold assignment.
pub fn cross_validate(
    data: &LongitudinalDataset,
    folds: usize,
    seed: u64,
    grid: &TuningGrid,
    kind: PenaltyKind,
    structure: WorkingCorrelation,
    options: &TuneOptions,
) -> Result<CvReport> {
    let assignment = fold_assignment(data.n(), folds, seed)?;
    cross_validate_with(data, &assignment, grid, kind, structure, options)
}

/// Subject-level cross-validation for a given fold of each subject.
pub fn cross_validate_with(
    data: &LongitudinalDataset,
    assignment: &[usize],
    grid: &TuningGrid,
    kind: PenaltyKind,
    structure: WorkingCorrelation,
    options: &TuneOptions,
) -> Result<CvReport> {
    grid.validate()?;
    if assignment.len() != data.n() {
        return Err(Error::DimensionMismatch { what: "fold assignment", expected: data.n(), found: assignment.len() });
    }
    let folds = assignment.iter().max().map_or(0, |m| m + 1);
    if folds < 2 {
        return Err(Error::InvalidInput("cross-validation needs at least 2 folds".into()));
    }
    let members: Vec<Vec<usize>> = (0..folds).map(|f| (0..data.n()).filter(|&i| assignment[i] == f).collect()).collect();
    if let Some(f) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::InvalidInput(format!("fold {f} has no subjects")));
    }

    let per_fold: Vec<Result<Vec<Option<f64>>>> = map_indexed(options.parallelism, folds, |f| {
        let train_ids: Vec<usize> = (0..data.n()).filter(|&i| assignment[i] != f).collect();
        let design = Arc::new(expand_design(&data.subset(&train_ids))?);
        let held_out = expand_design(&data.subset(&members[f]))?;
        let beta0 = init_lasso(&design, &options.fit.lasso)?.beta;
        let system = QifSystem::new(design, structure)?;
        let inner = TuneOptions { parallelism: Parallelism::Sequential, ..options.clone() };
        fit_grid(&system, &beta0, grid, kind, &inner)?
            .into_iter()
            .map(|(_, fit)| match fit {
                Some(fit) if fit.converged => design_mse(&fit.beta(), &held_out).map(Some),
                _ => Ok(None),
            })
            .collect()
    });
    let mut fold_mse = Vec::with_capacity(folds);
    for (f, r) in per_fold.into_iter().enumerate() {
        match r {
            Ok(v) => fold_mse.push(v),
            Err(e) => {
                warn!("fold {f} failed: {e}");
                return Err(e);
            }
        }
    }

    let cells_order: Vec<(f64, f64)> = grid.rows(kind).into_iter().flatten().collect();
    let cells: Vec<CellReport> = cells_order
        .iter()
        .enumerate()
        .map(|(c, &(l1, l2))| {
            let vals: Option<Vec<f64>> = fold_mse.iter().map(|f| f[c]).collect();
            let mse = vals.map(|v| v.iter().sum::<f64>() / v.len() as f64);
            CellReport { lambda1: l1, lambda2: l2, mse, converged: mse.is_some(), iterations: 0, error: None }
        })
        .collect();
    let best = argmin_cell(&cells).ok_or_else(|| Error::TuningFailed("no grid cell converged on every fold".into()))?;
    Ok(CvReport {
        kind,
        structure,
        folds,
        assignment: assignment.to_vec(),
        best_lambda1: cells[best].lambda1,
        best_lambda2: cells[best].lambda2,
        best_mse: cells[best].mse.expect("usable cell"),
        cells,
        fold_mse,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionCounts {
    pub tp_main: usize,
    pub fp_main: usize,
    pub tp_inter: usize,
    pub fp_inter: usize,
    pub tp_overall: usize,
    pub fp_overall: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub counts: SelectionCounts,
    pub mse: f64,
}

fn hits<T: Ord>(selected: &BTreeSet<T>, truth: &BTreeSet<T>) -> (usize, usize) {
    let tp = selected.intersection(truth).count();
    (tp, selected.len() - tp)
}

pub fn tpfp(
    selected_main: &BTreeSet<usize>,
    selected_inter: &BTreeSet<(usize, usize)>,
    true_main: &BTreeSet<usize>,
    true_inter: &BTreeSet<(usize, usize)>,
) -> SelectionCounts {
    let (tp_main, fp_main) = hits(selected_main, true_main);
    let (tp_inter, fp_inter) = hits(selected_inter, true_inter);
    SelectionCounts { tp_main, fp_main, tp_inter, fp_inter, tp_overall: tp_main + tp_inter, fp_overall: fp_main + fp_inter }
}

impl MetricsReport {
    /// Selection counts against `truth` and prediction MSE on `test`.
    pub fn score(fit: &FitResult, truth: &TrueCoefficients, test: &ExpandedDesign) -> Result<Self> {
        let counts = tpfp(&fit.selected_main, &fit.selected_inter, &truth.main, &truth.inter);
        Ok(Self { counts, mse: design_mse(&fit.beta(), test)? })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{draw_coefficients, draw_dataset, stream_rng, ScenarioConfig, Stream};
    use crate::solver::MomentUpdate;

    fn toy(n: usize, p: usize, noise_sd: f64, seed: u64, purpose: Stream) -> (LongitudinalDataset, TrueCoefficients) {
        let cfg = ScenarioConfig { n, k: 3, p, q: 2, n_true: 4, noise_sd, seed, ..Default::default() };
        let coefs = draw_coefficients(&cfg, &mut stream_rng(seed, 0, Stream::Truth)).unwrap();
        let data = draw_dataset(&cfg, &coefs, &mut stream_rng(seed, 0, purpose)).unwrap();
        (data, coefs)
    }

    fn small_grid() -> TuningGrid {
        TuningGrid::new(log_spaced(0.005, 0.1, 3), log_spaced(0.005, 0.1, 3), 3.0).unwrap()
    }

    #[test]
    fn default_grid_spans_range() {
        let g = TuningGrid::default();
        assert_eq!(g.lambda1_values.len(), 10);
        assert!((g.lambda1_values[0] - 0.01).abs() < 1e-15);
        assert!((g.lambda2_values[9] - 0.5).abs() < 1e-12);
        g.validate().unwrap();
    }

    #[test]
    fn grid_rejects_bad_axes() {
        assert!(TuningGrid::new(vec![], vec![0.1], 3.0).is_err());
        assert!(TuningGrid::new(vec![0.1, 0.05], vec![0.1], 3.0).is_err());
        assert!(TuningGrid::new(vec![0.0], vec![0.1], 3.0).is_err());
        assert!(TuningGrid::new(vec![0.1], vec![0.1], 1.0).is_err());
    }

    #[test]
    fn rows_follow_kind() {
        let g = small_grid();
        assert_eq!(g.rows(PenaltyKind::SparseGroup).len(), 3);
        let row = &g.rows(PenaltyKind::SparseGroup)[0];
        assert!(row.windows(2).all(|w| w[0].1 > w[1].1));
        assert!(g.rows(PenaltyKind::Group)[0].iter().all(|c| c.1 == 0.0));
        assert!(g.rows(PenaltyKind::Individual)[0].iter().all(|c| c.0 == 0.0));
    }

    #[test]
    fn single_cell_grid_returns_it() {
        let (train, _) = toy(60, 4, 1.0, 1, Stream::Train);
        let (validate, _) = toy(60, 4, 1.0, 1, Stream::Validate);
        let grid = TuningGrid::new(vec![0.05], vec![0.02], 3.0).unwrap();
        let t = grid_tune(&train, &validate, &grid, PenaltyKind::SparseGroup, WorkingCorrelation::Exchangeable, &TuneOptions::default()).unwrap();
        assert_eq!(t.report.cells.len(), 1);
        assert_eq!((t.report.best_lambda1, t.report.best_lambda2), (0.05, 0.02));
        assert_eq!((t.fit.lambda1, t.fit.lambda2), (0.05, 0.02));
    }

    #[test]
    fn chosen_mse_is_minimum_of_logged_cells() {
        let (train, _) = toy(60, 4, 1.0, 2, Stream::Train);
        for kind in [PenaltyKind::SparseGroup, PenaltyKind::Group, PenaltyKind::Individual] {
            let t = grid_tune(&train, &train, &small_grid(), kind, WorkingCorrelation::Ar1, &frozen_moments()).unwrap();
            let min = t.report.cells.iter().filter_map(|c| c.mse).fold(f64::INFINITY, f64::min);
            assert_eq!(t.report.best_mse, min);
            let refit = predict_mse(&t.fit, &train).unwrap();
            assert!((refit - t.report.best_mse).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_smaller_lambdas() {
        let cell = |l1, l2, mse| CellReport { lambda1: l1, lambda2: l2, mse, converged: true, iterations: 1, error: None };
        let cells = vec![cell(0.2, 0.1, Some(1.0)), cell(0.1, 0.3, Some(1.0)), cell(0.1, 0.2, Some(1.0)), cell(0.05, 0.1, None)];
        assert_eq!(argmin_cell(&cells), Some(2));
        assert_eq!(argmin_cell(&cells[3..]), None);
    }

    #[test]
    fn noise_free_toy_recovers_support() {
        let (train, truth) = toy(100, 5, 0.0, 3, Stream::Train);
        let (validate, _) = toy(100, 5, 0.0, 3, Stream::Validate);
        let grid = TuningGrid::new(vec![0.01, 0.05], vec![0.01, 0.05], 3.0).unwrap();
        let t = grid_tune(&train, &validate, &grid, PenaltyKind::SparseGroup, WorkingCorrelation::Exchangeable, &TuneOptions::default()).unwrap();
        assert_eq!(t.fit.selected_main, truth.main);
        assert_eq!(t.fit.selected_inter, truth.inter);
        assert!(t.report.best_mse < 1e-6, "mse {}", t.report.best_mse);
    }

    #[test]
    fn warm_start_runs_every_cell() {
        let (train, _) = toy(60, 4, 1.0, 4, Stream::Train);
        let (validate, _) = toy(60, 4, 1.0, 4, Stream::Validate);
        let options = TuneOptions { warm_start: true, ..Default::default() };
        let t = grid_tune(&train, &validate, &small_grid(), PenaltyKind::SparseGroup, WorkingCorrelation::Exchangeable, &options).unwrap();
        assert_eq!(t.report.cells.len(), 9);
    }

    #[test]
    fn parallel_and_sequential_tuning_agree() {
        let (train, _) = toy(60, 4, 1.0, 5, Stream::Train);
        let (validate, _) = toy(60, 4, 1.0, 5, Stream::Validate);
        let run = |parallelism| {
            let options = TuneOptions { parallelism, ..Default::default() };
            grid_tune(&train, &validate, &small_grid(), PenaltyKind::SparseGroup, WorkingCorrelation::Exchangeable, &options).unwrap().report
        };
        assert_eq!(run(Parallelism::Sequential), run(Parallelism::Rayon));
    }

    #[test]
    fn folds_partition_subjects() {
        let a = fold_assignment(400, 5, 9).unwrap();
        for f in 0..5 {
            assert_eq!(a.iter().filter(|&&x| x == f).count(), 80);
        }
        assert!(fold_assignment(10, 1, 0).is_err());
        assert!(fold_assignment(3, 4, 0).is_err());
    }

    fn frozen_moments() -> TuneOptions {
        TuneOptions { fit: FitOptions { moments: MomentUpdate::Initial, ..Default::default() }, ..Default::default() }
    }

    #[test]
    fn leave_one_subject_out_matches_loop() {
        let (data, _) = toy(12, 2, 1.0, 6, Stream::Train);
        let grid = TuningGrid::new(vec![0.02], vec![0.02, 0.05], 3.0).unwrap();
        // Folds of 11 subjects sit below the moment count; frozen moments keep every cell convergent.
        let options = frozen_moments();
        let assignment: Vec<usize> = (0..12).collect();
        let cv = cross_validate_with(&data, &assignment, &grid, PenaltyKind::SparseGroup, WorkingCorrelation::Exchangeable, &options).unwrap();
        let cells: Vec<(f64, f64)> = grid.rows(PenaltyKind::SparseGroup).concat();
        for (c, &(l1, l2)) in cells.iter().enumerate() {
            let mut total = 0.0;
            for i in 0..12 {
                let rest: Vec<usize> = (0..12).filter(|&s| s != i).collect();
                let train = data.subset(&rest);
                let spec = PenaltySpec::new(PenaltyKind::SparseGroup, l1, l2).unwrap();
                let fit = crate::solver::fit_dataset(&train, WorkingCorrelation::Exchangeable, &spec, &options.fit).unwrap();
                let held = data.subset(&[i]);
                let mut sq = 0.0;
                let mut count = 0;
                for j in 0..held.k() {
                    let mut pred = fit.beta_hat[0];
                    for u in 0..held.q() {
                        pred += fit.beta_hat[1 + u] * held.env(0, j, u);
                    }
                    let layout = held.layout();
                    for v in 0..held.p() {
                        let x = held.gen()[(0, v)];
                        pred += fit.beta_hat[layout.main_index(v)] * x;
                        for u in 0..held.q() {
                            pred += fit.beta_hat[layout.interaction_index(v, u)] * x * held.env(0, j, u);
                        }
                    }
                    sq += (held.y()[(0, j)] - pred).powi(2);
                    count += 1;
                }
                total += sq / count as f64;
            }
            let expected = total / 12.0;
            let got = cv.cells[c].mse.unwrap();
            assert!((got - expected).abs() < 1e-10 * expected.max(1.0), "{got} vs {expected}");
        }
    }

    #[test]
    fn duplicated_subjects_split_by_copy_give_equal_folds() {
        let (data, _) = toy(30, 3, 1.0, 7, Stream::Train);
        let ids: Vec<usize> = (0..30).chain(0..30).collect();
        let doubled = data.subset(&ids);
        let assignment: Vec<usize> = (0..60).map(|i| i / 30).collect();
        let grid = TuningGrid::new(vec![0.03], vec![0.03], 3.0).unwrap();
        let cv = cross_validate_with(&doubled, &assignment, &grid, PenaltyKind::SparseGroup, WorkingCorrelation::Ar1, &frozen_moments()).unwrap();
        let (a, b) = (cv.fold_mse[0][0].unwrap(), cv.fold_mse[1][0].unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn cv_rejects_empty_fold() {
        let (data, _) = toy(10, 2, 1.0, 8, Stream::Train);
        let assignment = vec![0, 0, 0, 0, 0, 2, 2, 2, 2, 2];
        let err = cross_validate_with(&data, &assignment, &small_grid(), PenaltyKind::Group, WorkingCorrelation::Independence, &TuneOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn mse_examples() {
        let (data, truth) = toy(20, 3, 0.0, 9, Stream::Train);
        let design = expand_design(&data).unwrap();
        assert!(design_mse(&truth.beta_vector(), &design).unwrap() < 1e-24);
        let n = data.n();
        let constant = LongitudinalDataset::balanced(
            nalgebra::DMatrix::from_element(n, 3, 2.5),
            vec![0.0; n * 3 * 2],
            2,
            nalgebra::DMatrix::zeros(n, 3),
        )
        .unwrap();
        let zero = DVector::zeros(design.d());
        assert!((design_mse(&zero, &expand_design(&constant).unwrap()).unwrap() - 6.25).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_loop() {
        let (data, _) = toy(15, 3, 1.0, 10, Stream::Test);
        let design = expand_design(&data).unwrap();
        let beta = DVector::from_fn(design.d(), |j, _| ((j * 7 % 5) as f64 - 2.0) * 0.1);
        let layout = data.layout();
        let mut sq = 0.0;
        for i in 0..data.n() {
            for j in 0..data.k() {
                let mut pred = beta[0];
                for u in 0..data.q() {
                    pred += beta[1 + u] * data.env(i, j, u);
                }
                for v in 0..data.p() {
                    let x = data.gen()[(i, v)];
                    pred += beta[layout.main_index(v)] * x;
                    for u in 0..data.q() {
                        pred += beta[layout.interaction_index(v, u)] * x * data.env(i, j, u);
                    }
                }
                sq += (data.y()[(i, j)] - pred).powi(2);
            }
        }
        let expected = sq / (data.n() * data.k()) as f64;
        assert!((design_mse(&beta, &design).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn tpfp_examples() {
        let main: BTreeSet<usize> = [1, 3].into();
        let inter: BTreeSet<(usize, usize)> = [(0, 1)].into();
        let c = tpfp(&main, &inter, &main, &inter);
        assert_eq!((c.tp_overall, c.fp_overall), (3, 0));
        let c = tpfp(&[1, 2].into(), &BTreeSet::new(), &main, &inter);
        assert_eq!((c.tp_main, c.fp_main, c.tp_inter, c.fp_inter), (1, 1, 0, 0));
        let c = tpfp(&BTreeSet::new(), &BTreeSet::new(), &main, &inter);
        assert_eq!(c, SelectionCounts::default());
    }

    proptest::proptest! {
        #[test]
        fn tpfp_counts_add_up(sel in proptest::collection::btree_set(0usize..20, 0..20), truth in proptest::collection::btree_set(0usize..20, 0..20)) {
            let c = tpfp(&sel, &BTreeSet::new(), &truth, &BTreeSet::new());
            proptest::prop_assert_eq!(c.tp_main + c.fp_main, sel.len());
            proptest::prop_assert!(c.tp_main <= truth.len());
            proptest::prop_assert_eq!(c.tp_overall, c.tp_main);
        }
    }
}
