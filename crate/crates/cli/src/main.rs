use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bilevel_qif::experiment::{bench, run_experiment, write_outcome, BenchConfig, ExperimentConfig};
use bilevel_qif::io::{load_dataset, load_json, save_dataset, save_json, save_screen_table, TruthSidecar};
use bilevel_qif::screen::{marginal_screen, DEFAULT_CUTOFF};
use bilevel_qif::simgen::{drop_time_points, simulate_replicate, stream_rng, Scenario, ScenarioConfig, Stream};
use bilevel_qif::solver::{fit_dataset, FitOptions, FitResult, MomentUpdate};
use bilevel_qif::tuning::{cross_validate, grid_tune, predict_mse, tpfp, MetricsReport, TuneOptions, TuningGrid};
use bilevel_qif::{Error, Parallelism, PenaltyKind, PenaltySpec, WorkingCorrelation};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "bilevel-qif", version, about = "Sparse-group MCP selection for longitudinal G×E models fitted by QIF")]
struct Cli {
    /// Master seed for simulation and fold assignment.
    #[arg(long, global = true, default_value_t = 2022)]
    seed: u64,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// 1 = expression AR-1, 2 = dichotomized SNPs, 3 = LD SNPs.
    #[arg(long, default_value = "1")]
    scenario: Scenario,
    #[arg(long, default_value_t = 400)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 200)]
    p: usize,
    #[arg(long, default_value_t = 5)]
    q: usize,
    #[arg(long, default_value_t = 0.8)]
    rho_x: f64,
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    #[arg(long, default_value_t = 0.3)]
    maf: f64,
    #[arg(long, default_value_t = 0.3)]
    r: f64,
    #[arg(long, default_value_t = 25)]
    n_true: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sd: f64,
}

impl ScenarioArgs {
    fn config(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            n: self.n,
            k: self.k,
            p: self.p,
            q: self.q,
            rho_x: self.rho_x,
            tau: self.tau,
            maf: self.maf,
            r: self.r,
            n_true: self.n_true,
            noise_sd: self.noise_sd,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Selection threshold on |β̂|.
    #[arg(long, default_value_t = 1e-3)]
    threshold: f64,
    /// Where Ω̄ is evaluated: every-iteration or initial.
    #[arg(long, default_value = "every-iteration")]
    moments: MomentUpdate,
}

impl SolverArgs {
    fn options(&self) -> FitOptions {
        FitOptions { max_iter: self.max_iter, tol: self.tol, threshold: self.threshold, moments: self.moments, ..Default::default() }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train/validate/test datasets and the truth sidecar.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Replicate index (selects the random streams).
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        /// Fraction of training time points to delete.
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
    },
    /// Fit one penalized QIF model at fixed tuning parameters.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.03)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.03)]
        lambda2: f64,
        #[arg(long, default_value_t = 3.0)]
        gamma: f64,
        #[arg(long, default_value = "sparse-group")]
        penalty: PenaltyKind,
        #[arg(long, default_value = "exchangeable")]
        corr: WorkingCorrelation,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Choose (λ₁, λ₂) by validation set or subject-level cross-validation.
    Tune {
        #[arg(long)]
        data: PathBuf,
        /// Independent validation dataset; without it, cross-validation is used.
        #[arg(long)]
        validation_file: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Comma-separated λ₁ grid (default: 10 log-spaced values in [0.01, 0.5]).
        #[arg(long, value_delimiter = ',')]
        grid_l1: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        grid_l2: Vec<f64>,
        #[arg(long, default_value_t = 3.0)]
        gamma: f64,
        #[arg(long, default_value = "sparse-group")]
        penalty: PenaltyKind,
        #[arg(long, default_value = "exchangeable")]
        corr: WorkingCorrelation,
        /// Start each cell from the previous cell's estimate.
        #[arg(long)]
        warm_start: bool,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Marginal G×E prescreening of SNPs.
    Screen {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: f64,
    },
    /// Score a saved fit on a dataset, optionally against the truth.
    Evaluate {
        /// `fit.json` written by `fit` or `tune`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Replicated simulation study with tuning and a mean(sd) summary.
    RunExperiment {
        /// JSON experiment config; command-line flags are ignored when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        #[arg(long, value_delimiter = ',', default_value = "exchangeable")]
        corr: Vec<WorkingCorrelation>,
        #[arg(long, value_delimiter = ',', default_value = "sparse-group,group,individual")]
        penalty: Vec<PenaltyKind>,
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Single-threaded fit timings at fixed tuning parameters.
    Bench {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 3)]
        replicates: usize,
        #[arg(long, default_value_t = 0.03)]
        lambda1: f64,
        #[arg(long, default_value_t = 0.03)]
        lambda2: f64,
        #[arg(long, value_delimiter = ',', default_value = "independence,exchangeable,ar1")]
        corr: Vec<WorkingCorrelation>,
        #[arg(long, value_delimiter = ',', default_value = "sparse-group")]
        penalty: Vec<PenaltyKind>,
        #[command(flatten)]
        solver: SolverArgs,
    },
}

/// Every JSON artifact carries the command, seed and resolved settings.
#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    command: &'a str,
    seed: u64,
    config: C,
    result: R,
}

fn write_envelope<C: Serialize, R: Serialize>(out: &Path, name: &str, command: &str, seed: u64, config: C, result: R) -> Result<PathBuf, Error> {
    let path = out.join(name);
    save_json(&Envelope { command, seed, config, result }, &path)?;
    Ok(path)
}

fn grid_from(l1: &[f64], l2: &[f64], gamma: f64) -> Result<TuningGrid, Error> {
    let default = TuningGrid::default();
    let pick = |v: &[f64], d: &[f64]| if v.is_empty() { d.to_vec() } else { v.to_vec() };
    TuningGrid::new(pick(l1, &default.lambda1_values), pick(l2, &default.lambda2_values), gamma)
}

fn load_fit(path: &Path) -> Result<FitResult, Error> {
    let value: serde_json::Value = load_json(path)?;
    let inner = value.get("result").map(|r| r.get("fit").unwrap_or(r)).unwrap_or(&value);
    Ok(serde_json::from_value(inner.clone())?)
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidInput(format!("cannot configure thread pool: {e}")))?;
    }
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    let seed = cli.seed;

    match cli.command {
        Command::Simulate { scenario, replicate, missing } => {
            let config = scenario.config(seed);
            config.validate()?;
            let mut rep = simulate_replicate(&config, replicate)?;
            if missing > 0.0 {
                rep.train = drop_time_points(&rep.train, missing, &mut stream_rng(seed, replicate, Stream::Missing))?;
            }
            save_dataset(&rep.train, &out.join("train.csv"))?;
            save_dataset(&rep.validate, &out.join("validate.csv"))?;
            save_dataset(&rep.test, &out.join("test.csv"))?;
            save_json(&TruthSidecar::new(&config, replicate, &rep.coefficients), &out.join("truth.json"))?;
            Ok(json!({
                "train": out.join("train.csv"),
                "validate": out.join("validate.csv"),
                "test": out.join("test.csv"),
                "truth": out.join("truth.json"),
                "nonzero": rep.coefficients.nonzero_count(),
            }))
        }
        Command::Fit { data, lambda1, lambda2, gamma, penalty, corr, solver } => {
            let dataset = load_dataset(&data)?;
            let spec = PenaltySpec::with_gamma(penalty, lambda1, lambda2, gamma)?;
            let options = solver.options();
            let fit = fit_dataset(&dataset, corr, &spec, &options)?;
            let config = json!({ "data": data, "penalty": spec.kind, "lambda1": lambda1, "lambda2": lambda2, "gamma": gamma, "corr": corr, "options": options });
            let path = write_envelope(out, "fit.json", "fit", seed, config, &fit)?;
            Ok(json!({ "fit": path, "iterations": fit.iterations, "converged": fit.converged, "selected": fit.selected_main.len() + fit.selected_inter.len() }))
        }
        Command::Tune { data, validation_file, folds, grid_l1, grid_l2, gamma, penalty, corr, warm_start, solver } => {
            let dataset = load_dataset(&data)?;
            let grid = grid_from(&grid_l1, &grid_l2, gamma)?;
            let options = TuneOptions { fit: solver.options(), warm_start, parallelism: Parallelism::default() };
            let config = json!({ "data": data, "validation_file": validation_file, "folds": folds, "grid": grid, "penalty": penalty, "corr": corr, "options": options });
            let (report, fit) = match &validation_file {
                Some(v) => {
                    let validate = load_dataset(v)?;
                    let tuned = grid_tune(&dataset, &validate, &grid, penalty, corr, &options)?;
                    (serde_json::to_value(&tuned.report)?, tuned.fit)
                }
                None => {
                    let cv = cross_validate(&dataset, folds, seed, &grid, penalty, corr, &options)?;
                    let spec = grid.spec(penalty, cv.best_lambda1, cv.best_lambda2)?;
                    let fit = fit_dataset(&dataset, corr, &spec, &options.fit)?;
                    (serde_json::to_value(&cv)?, fit)
                }
            };
            let chosen = json!({ "lambda1": fit.lambda1, "lambda2": fit.lambda2 });
            write_envelope(out, "tune.json", "tune", seed, &config, json!({ "report": report, "chosen": chosen }))?;
            let path = write_envelope(out, "fit.json", "tune", seed, &config, &fit)?;
            Ok(json!({ "tune": out.join("tune.json"), "fit": path, "chosen": chosen }))
        }
        Command::Screen { data, cutoff } => {
            let dataset = load_dataset(&data)?;
            let report = marginal_screen(&dataset, cutoff, Parallelism::default())?;
            save_screen_table(&report, &out.join("screen_pvalues.csv"))?;
            let kept: Vec<String> = report.kept.iter().map(|v| format!("x{}", v + 1)).collect();
            std::fs::write(out.join("screen_kept.txt"), kept.join("\n") + "\n")?;
            write_envelope(out, "screen.json", "screen", seed, json!({ "data": data, "cutoff": cutoff }), &report)?;
            Ok(json!({ "kept": report.kept.len(), "screened": report.min_p.len(), "constant": report.constant.len() }))
        }
        Command::Evaluate { fit, data, truth } => {
            let fitted = load_fit(&fit)?;
            let dataset = load_dataset(&data)?;
            let mse = predict_mse(&fitted, &dataset)?;
            let result = match &truth {
                Some(t) => {
                    let sidecar: TruthSidecar = load_json(t)?;
                    let truth = sidecar.coefficients();
                    let counts = tpfp(&fitted.selected_main, &fitted.selected_inter, &truth.main, &truth.inter);
                    serde_json::to_value(MetricsReport { counts, mse })?
                }
                None => json!({ "mse": mse }),
            };
            write_envelope(out, "evaluation.json", "evaluate", seed, json!({ "fit": fit, "data": data, "truth": truth }), &result)?;
            Ok(result)
        }
        Command::RunExperiment { config, scenario, replicates, corr, penalty, missing, solver } => {
            let config = match config {
                Some(path) => load_json::<ExperimentConfig>(&path)?,
                None => ExperimentConfig {
                    scenario: scenario.config(seed),
                    structures: corr,
                    kinds: penalty,
                    replicates,
                    missing_fraction: missing,
                    tune: TuneOptions { fit: solver.options(), ..Default::default() },
                    ..Default::default()
                },
            };
            let outcome = run_experiment(&config)?;
            write_outcome(&outcome, out)?;
            eprint!("{}", outcome.summary_table());
            Ok(json!({ "rows": outcome.rows.len(), "failures": outcome.failures.len(), "summary": out.join("summary.txt") }))
        }
        Command::Bench { scenario, replicates, lambda1, lambda2, corr, penalty, solver } => {
            let config = BenchConfig {
                scenario: scenario.config(seed),
                structures: corr,
                kinds: penalty,
                lambda1,
                lambda2,
                replicates,
                fit: solver.options(),
            };
            let report = bench(&config)?;
            save_json(&report, &out.join("bench.json"))?;
            let rows: Vec<_> = report
                .rows
                .iter()
                .map(|r| json!({ "structure": r.structure, "kind": r.kind, "seconds": r.summary.cell(3) }))
                .collect();
            Ok(json!({ "bench": out.join("bench.json"), "timings": rows }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = json!({ "error": { "kind": "usage", "message": e.to_string().trim() } });
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
