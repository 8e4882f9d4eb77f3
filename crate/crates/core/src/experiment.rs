//! Replicated simulation experiments and fit timing.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use crate::correlation::WorkingCorrelation;
use crate::datamodel::{expand_design, ExpandedDesign};
use crate::error::{Error, Result};
use crate::io::save_json;
use crate::parallel::{map_indexed, single_threaded, Parallelism};
use crate::penalty::{PenaltyKind, PenaltySpec};
use crate::qif::QifSystem;
use crate::simgen::{drop_time_points, simulate_replicate, stream_rng, Replicate, ScenarioConfig, Stream};
use crate::solver::{init_lasso, newton_fit, FitOptions};
use crate::tuning::{grid_tune_system, MetricsReport, TuneOptions, TuningGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub structures: Vec<WorkingCorrelation>,
    pub kinds: Vec<PenaltyKind>,
    pub grid: TuningGrid,
    pub replicates: usize,
    /// Fraction of training time points deleted at random (0 keeps data balanced).
    pub missing_fraction: f64,
    pub tune: TuneOptions,
    pub parallelism: Parallelism,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            structures: vec![WorkingCorrelation::Exchangeable],
            kinds: vec![PenaltyKind::SparseGroup, PenaltyKind::Group, PenaltyKind::Individual],
            grid: TuningGrid::default(),
            replicates: 10,
            missing_fraction: 0.0,
            tune: TuneOptions::default(),
            parallelism: Parallelism::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.grid.validate()?;
        self.tune.fit.validate()?;
        if self.replicates == 0 {
            return Err(Error::InvalidInput("replicate count must be at least 1".into()));
        }
        if self.structures.is_empty() || self.kinds.is_empty() {
            return Err(Error::InvalidInput("at least one structure and one penalty kind are required".into()));
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(Error::InvalidInput(format!("missing fraction must lie in [0, 1), got {}", self.missing_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: u64,
    pub structure: WorkingCorrelation,
    pub kind: PenaltyKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub validation_mse: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: u64,
    pub structure: Option<WorkingCorrelation>,
    pub kind: Option<PenaltyKind>,
    pub error: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation; the sd of a single value is 0.
    pub fn of(values: &[f64]) -> Self {
        match values.len() {
            0 => Self { mean: f64::NAN, sd: f64::NAN },
            1 => Self { mean: values[0], sd: 0.0 },
            _ => Self { mean: values.mean(), sd: values.std_dev() },
        }
    }

    pub fn cell(&self, digits: usize) -> String {
        format!("{:.*}({:.*})", digits, self.mean, digits, self.sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub structure: WorkingCorrelation,
    pub kind: PenaltyKind,
    pub replicates: usize,
    pub failures: usize,
    pub tp_main: MeanSd,
    pub fp_main: MeanSd,
    pub tp_inter: MeanSd,
    pub fp_inter: MeanSd,
    pub tp_overall: MeanSd,
    pub fp_overall: MeanSd,
    pub mse: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub rows: Vec<ReplicateRow>,
    pub failures: Vec<ReplicateFailure>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentOutcome {
    pub fn summary_for(&self, structure: WorkingCorrelation, kind: PenaltyKind) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.structure == structure && s.kind == kind)
    }

    /// Plain-text table in the `mean(sd)` layout.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<13} {:<13} {:>4} {:>5} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>13}",
            "structure", "method", "ok", "fail", "TP main", "FP main", "TP inter", "FP inter", "TP", "FP", "test MSE"
        );
        for s in &self.summary {
            let _ = writeln!(
                out,
                "{:<13} {:<13} {:>4} {:>5} {:>11} {:>11} {:>11} {:>11} {:>11} {:>11} {:>13}",
                s.structure.to_string(),
                s.kind.to_string(),
                s.replicates,
                s.failures,
                s.tp_main.cell(1),
                s.fp_main.cell(1),
                s.tp_inter.cell(1),
                s.fp_inter.cell(1),
                s.tp_overall.cell(1),
                s.fp_overall.cell(1),
                s.mse.cell(3),
            );
        }
        out
    }
}

/// Summaries per `(structure, kind)` in configuration order.
pub fn summarize(config: &ExperimentConfig, rows: &[ReplicateRow], failures: &[ReplicateFailure]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for &structure in &config.structures {
        for &kind in &config.kinds {
            let mine: Vec<&ReplicateRow> = rows.iter().filter(|r| r.structure == structure && r.kind == kind).collect();
            let failed = failures
                .iter()
                .filter(|f| f.structure.is_none_or(|s| s == structure) && f.kind.is_none_or(|k| k == kind))
                .count();
            let stat = |f: &dyn Fn(&ReplicateRow) -> f64| MeanSd::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            out.push(SummaryRow {
                structure,
                kind,
                replicates: mine.len(),
                failures: failed,
                tp_main: stat(&|r| r.metrics.counts.tp_main as f64),
                fp_main: stat(&|r| r.metrics.counts.fp_main as f64),
                tp_inter: stat(&|r| r.metrics.counts.tp_inter as f64),
                fp_inter: stat(&|r| r.metrics.counts.fp_inter as f64),
                tp_overall: stat(&|r| r.metrics.counts.tp_overall as f64),
                fp_overall: stat(&|r| r.metrics.counts.fp_overall as f64),
                mse: stat(&|r| r.metrics.mse),
            });
        }
    }
    out
}

/// The replicate's data with the configured share of training time points removed.
pub fn prepare_replicate(config: &ExperimentConfig, index: u64) -> Result<Replicate> {
    let mut rep = simulate_replicate(&config.scenario, index)?;
    if config.missing_fraction > 0.0 {
        let mut rng = stream_rng(config.scenario.seed, index, Stream::Missing);
        rep.train = drop_time_points(&rep.train, config.missing_fraction, &mut rng)?;
    }
    Ok(rep)
}

fn run_replicate(config: &ExperimentConfig, index: u64) -> (Vec<ReplicateRow>, Vec<ReplicateFailure>) {
    let whole = |e: Error| (Vec::new(), vec![ReplicateFailure { replicate: index, structure: None, kind: None, error: e.to_string() }]);
    let prepared = (|| -> Result<(Replicate, Arc<ExpandedDesign>, ExpandedDesign, ExpandedDesign)> {
        let rep = prepare_replicate(config, index)?;
        let train = Arc::new(expand_design(&rep.train)?);
        let validate = expand_design(&rep.validate)?;
        let test = expand_design(&rep.test)?;
        Ok((rep, train, validate, test))
    })();
    let (rep, train, validate, test) = match prepared {
        Ok(p) => p,
        Err(e) => return whole(e),
    };
    let beta0 = match init_lasso(&train, &config.tune.fit.lasso) {
        Ok(l) => l.beta,
        Err(e) => return whole(e),
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut base: Option<QifSystem> = None;
    for &structure in &config.structures {
        let system = match &base {
            Some(b) => b.for_structure(structure),
            None => QifSystem::new(train.clone(), structure),
        };
        let system = match system {
            Ok(s) => s,
            Err(e) => {
                failures.push(ReplicateFailure { replicate: index, structure: Some(structure), kind: None, error: e.to_string() });
                continue;
            }
        };
        for &kind in &config.kinds {
            let scored = grid_tune_system(&system, &beta0, &validate, &config.grid, kind, &config.tune).and_then(|t| {
                let metrics = MetricsReport::score(&t.fit, &rep.coefficients, &test)?;
                Ok(ReplicateRow {
                    replicate: index,
                    structure,
                    kind,
                    lambda1: t.report.best_lambda1,
                    lambda2: t.report.best_lambda2,
                    validation_mse: t.report.best_mse,
                    iterations: t.fit.iterations,
                    converged: t.fit.converged,
                    metrics,
                })
            });
            match scored {
                Ok(row) => {
                    info!(
                        "replicate {index} {structure} {kind}: TP {} FP {} MSE {:.4}",
                        row.metrics.counts.tp_overall, row.metrics.counts.fp_overall, row.metrics.mse
                    );
                    rows.push(row);
                }
                Err(e) => {
                    warn!("replicate {index} {structure} {kind} failed: {e}");
                    failures.push(ReplicateFailure { replicate: index, structure: Some(structure), kind: Some(kind), error: e.to_string() });
                }
            }
        }
        base.get_or_insert(system);
    }
    (rows, failures)
}

/// Simulates, tunes and scores every replicate. Failed replicates are
/// listed in the outcome and left out of the summary.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let per_rep = map_indexed(config.parallelism, config.replicates, |r| run_replicate(config, r as u64));
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, f) in per_rep {
        rows.extend(r);
        failures.extend(f);
    }
    let summary = summarize(config, &rows, &failures);
    Ok(ExperimentOutcome { config: config.clone(), rows, failures, summary })
}

/// Writes `experiment.json` (config, rows, failures, summary),
/// `replicates.csv` and `summary.txt` into `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_json(outcome, &dir.join("experiment.json"))?;
    let config_line = serde_json::to_string(&outcome.config)?;
    let mut w = csv::WriterBuilder::new().from_path(dir.join("replicates.csv"))?;
    w.write_record([
        "replicate", "structure", "kind", "lambda1", "lambda2", "validation_mse", "iterations", "converged", "tp_main", "fp_main", "tp_inter",
        "fp_inter", "tp_overall", "fp_overall", "mse",
    ])?;
    for r in &outcome.rows {
        let c = r.metrics.counts;
        w.write_record([
            r.replicate.to_string(),
            r.structure.to_string(),
            r.kind.to_string(),
            r.lambda1.to_string(),
            r.lambda2.to_string(),
            r.validation_mse.to_string(),
            r.iterations.to_string(),
            r.converged.to_string(),
            c.tp_main.to_string(),
            c.fp_main.to_string(),
            c.tp_inter.to_string(),
            c.fp_inter.to_string(),
            c.tp_overall.to_string(),
            c.fp_overall.to_string(),
            r.metrics.mse.to_string(),
        ])?;
    }
    w.flush()?;
    let mut text = format!("# config: {config_line}\n");
    text.push_str(&outcome.summary_table());
    if !outcome.failures.is_empty() {
        let _ = writeln!(text, "\n{} failure(s):", outcome.failures.len());
        for f in &outcome.failures {
            let _ = writeln!(text, "  replicate {}: {}", f.replicate, f.error);
        }
    }
    std::fs::write(dir.join("summary.txt"), text)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub scenario: ScenarioConfig,
    pub structures: Vec<WorkingCorrelation>,
    pub kinds: Vec<PenaltyKind>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub replicates: usize,
    pub fit: FitOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            structures: vec![WorkingCorrelation::Independence, WorkingCorrelation::Exchangeable, WorkingCorrelation::Ar1],
            kinds: vec![PenaltyKind::SparseGroup],
            lambda1: 0.03,
            lambda2: 0.03,
            replicates: 3,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub structure: WorkingCorrelation,
    pub kind: PenaltyKind,
    pub seconds: Vec<f64>,
    pub iterations: Vec<usize>,
    pub summary: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

/// Wall-clock seconds of the single-threaded fit stage (moment system and
/// Newton iterations) at fixed tuning parameters. The LASSO start does not
/// depend on the structure or the penalty, so it is computed once per
/// replicate outside the timed region.
pub fn bench(config: &BenchConfig) -> Result<BenchReport> {
    config.scenario.validate()?;
    config.fit.validate()?;
    if config.replicates == 0 {
        return Err(Error::InvalidInput("replicate count must be at least 1".into()));
    }
    let mut starts = Vec::with_capacity(config.replicates);
    for r in 0..config.replicates as u64 {
        let rep = simulate_replicate(&config.scenario, r)?;
        let design = Arc::new(expand_design(&rep.train)?);
        let beta0 = init_lasso(&design, &config.fit.lasso)?.beta;
        starts.push((design, beta0));
    }
    let mut rows = Vec::new();
    for &structure in &config.structures {
        for &kind in &config.kinds {
            let (l1, l2) = match kind {
                PenaltyKind::SparseGroup => (config.lambda1, config.lambda2),
                PenaltyKind::Group => (config.lambda1, 0.0),
                PenaltyKind::Individual => (0.0, config.lambda2),
            };
            let spec = PenaltySpec::new(kind, l1, l2)?;
            let mut seconds = Vec::with_capacity(starts.len());
            let mut iterations = Vec::with_capacity(starts.len());
            for (design, beta0) in &starts {
                let (elapsed, iters) = single_threaded(|| -> Result<(f64, usize)> {
                    let start = Instant::now();
                    let system = QifSystem::new(design.clone(), structure)?;
                    let fit = newton_fit(&system, &spec, beta0, &config.fit)?;
                    Ok((start.elapsed().as_secs_f64(), fit.iterations))
                })?;
                seconds.push(elapsed);
                iterations.push(iters);
            }
            let summary = MeanSd::of(&seconds);
            rows.push(BenchRow { structure, kind, seconds, iterations, summary });
        }
    }
    Ok(BenchReport { config: config.clone(), rows })
}
