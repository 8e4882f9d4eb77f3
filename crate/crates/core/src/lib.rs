//! Sparse-group MCP variable selection for longitudinal gene-environment
//! interaction models, fitted with quadratic inference functions.

pub mod correlation;
pub mod datamodel;
pub mod error;
pub mod experiment;
pub mod io;
pub mod parallel;
pub mod penalty;
pub mod qif;
pub mod screen;
pub mod simgen;
pub mod solver;
pub mod tuning;

pub use correlation::{ClusterTransform, WorkingCorrelation};
pub use datamodel::{expand_design, validate_dataset, CoefLayout, ExpandedDesign, LongitudinalDataset, Violation};
pub use error::{Error, Result};
pub use experiment::{bench, run_experiment, BenchConfig, ExperimentConfig, ExperimentOutcome};
pub use parallel::Parallelism;
pub use penalty::{PenaltyKind, PenaltySpec};
pub use qif::{QifEvaluation, QifSystem};
pub use screen::{marginal_screen, ScreenReport};
pub use solver::{fit_dataset, init_lasso, newton_fit, penalized_objective, threshold_select, FitOptions, FitResult, LassoOptions, MomentUpdate};
pub use tuning::{cross_validate, grid_tune, predict_mse, tpfp, MetricsReport, TuningGrid};
