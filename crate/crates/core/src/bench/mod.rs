//! Experiment harness behind the `vipinn` command line: single runs, method
//! comparisons, parameter grids and the oracle self-check.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::losses::WeightStrategy;
use crate::mlp::Architecture;
use crate::oracle::{
    adam_reference, fd_check_loss, manufactured_residuals, BurgersReference, CacheStatus, LossVariant, OracleError,
    BURGERS_ORDER,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pde::{catalog, problem, Counts, ProblemKind};
use crate::sampler::{test_grid, TestGrid};
use crate::trainer::{aggregate, train, RunReport, TrainConfig, TrainError};
use config::{ExperimentFile, GridAxes, GridFile};
use output::{aggregate_csv, curve_csv, field_csv, grid_csv, runs_csv, write_atomic};

pub const DEFAULT_OUTPUT_DIR: &str = "results";
pub const DEFAULT_CACHE_DIR: &str = ".vipinn-cache";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl BenchError {
    /// Errors before any training are configuration errors (exit 2).
    pub fn exit_code(&self) -> i32 {
        2
    }
}

/// How a command finished when it did not hit an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Outputs were written but some runs diverged.
    Diverged { runs: usize },
    ChecksFailed { failed: usize },
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::ChecksFailed { .. } => 1,
            Outcome::Diverged { .. } => 3,
        }
    }
}

/// Command-line overrides shared by the training commands.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    pub jobs: Option<usize>,
    pub seed_override: Option<Vec<u64>>,
    pub cache_dir: Option<PathBuf>,
    /// Record wall-clock time in the curve files (makes them
    /// non-reproducible).
    pub timing: bool,
}

impl RunOptions {
    fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR))
    }

    fn out_dir(&self, from_config: &Option<PathBuf>) -> PathBuf {
        self.out.clone().or_else(|| from_config.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    fn apply(&self, config: &mut TrainConfig) -> Result<(), BenchError> {
        if let Some(seeds) = &self.seed_override {
            if seeds.is_empty() {
                return Err(BenchError::Config("--seed-override needs at least one seed".into()));
            }
            config.seeds = seeds.clone();
        }
        config.record_wall_clock = self.timing;
        Ok(())
    }
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, BenchError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(BenchError::Config("--jobs must be at least 1".into()));
        }
        b = b.num_threads(j);
    }
    b.build().map_err(|e| BenchError::Pool(e.to_string()))
}

/// The evaluation grid of a config, loading or generating the Burgers
/// reference when needed.
pub fn prepare_grid(config: &TrainConfig, cache_dir: &Path) -> Result<TestGrid, BenchError> {
    let p = problem(config.problem);
    let reference = if config.problem == ProblemKind::Burgers {
        Some(BurgersReference::load_or_generate(cache_dir)?.0)
    } else {
        None
    };
    test_grid(&p, config.test_points, reference.as_ref()).map_err(|e| BenchError::Config(e.to_string()))
}

/// Trains every `(config, seed)` pair on the pool. Results are in input
/// order whatever the scheduling.
fn train_all(
    configs: &[TrainConfig],
    grid: &TestGrid,
    jobs: Option<usize>,
) -> Result<Vec<Vec<RunReport>>, BenchError> {
    let tasks: Vec<(usize, u64)> =
        configs.iter().enumerate().flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s))).collect();
    let flat: Vec<RunReport> =
        pool(jobs)?.install(|| tasks.par_iter().map(|&(i, s)| train(&configs[i], s, grid)).collect::<Result<_, _>>())?;
    let mut it = flat.into_iter();
    Ok(configs.iter().map(|c| it.by_ref().take(c.seeds.len()).collect()).collect())
}

fn method_column(s: &WeightStrategy) -> String {
    s.label().to_uppercase()
}

/// Files written by a training command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Written {
    pub files: Vec<PathBuf>,
}

impl Written {
    fn put(&mut self, path: PathBuf, contents: &str) -> Result<(), BenchError> {
        write_atomic(&path, contents)?;
        self.files.push(path);
        Ok(())
    }
}

fn run_methods(path: &Path, opts: &RunOptions, compare: bool) -> Result<(Outcome, Written), BenchError> {
    let mut exp = ExperimentFile::load(path)?.resolve()?;
    match (compare, exp.configs.len()) {
        (false, 1) => {}
        (false, _) => return Err(BenchError::Config("run takes a single method; use compare for several".into())),
        (true, n) if n < 2 => return Err(BenchError::Config("compare needs at least two methods".into())),
        _ => {}
    }
    for c in &mut exp.configs {
        opts.apply(c)?;
    }
    let out = opts.out_dir(&exp.output_dir);
    let grid = prepare_grid(&exp.configs[0], &opts.cache_dir())?;
    let results = train_all(&exp.configs, &grid, opts.jobs)?;

    let prefix = exp.problem().name();
    let mut written = Written::default();
    let mut columns = Vec::new();
    let mut run_rows = Vec::new();
    for (config, reports) in exp.configs.iter().zip(&results) {
        let label = config.strategy.label();
        for r in reports {
            written.put(out.join(format!("{prefix}_{label}_seed{}_curve.csv", r.seed)), &curve_csv(r))?;
            if r.succeeded() {
                written.put(out.join(format!("{prefix}_{label}_seed{}_field.csv", r.seed)), &field_csv(&grid, r))?;
            }
            run_rows.push((label.to_string(), r));
        }
        columns.push((method_column(&config.strategy), aggregate(reports).ok()));
    }
    let stem = if compare { "compare".to_string() } else { exp.configs[0].strategy.label().to_string() };
    written.put(out.join(format!("{prefix}_{stem}_aggregate.csv")), &aggregate_csv(&columns))?;
    written.put(out.join(format!("{prefix}_{stem}_runs.csv")), &runs_csv(&run_rows))?;
    let failed = results.iter().flatten().filter(|r| !r.succeeded()).count();
    Ok((if failed > 0 { Outcome::Diverged { runs: failed } } else { Outcome::Success }, written))
}

/// Trains one method over its seeds and writes per-seed curves and error
/// fields, the aggregate statistics and a run status table.
pub fn cmd_run(path: &Path, opts: &RunOptions) -> Result<(Outcome, Written), BenchError> {
    run_methods(path, opts, false)
}

/// Like [`cmd_run`] for several methods; the aggregate has one column per
/// method.
pub fn cmd_compare(path: &Path, opts: &RunOptions) -> Result<(Outcome, Written), BenchError> {
    run_methods(path, opts, true)
}

/// Trains every cell of a grid with every seed and writes the mean final
/// L2-error per cell.
pub fn cmd_grid(path: &Path, opts: &RunOptions) -> Result<(Outcome, Written), BenchError> {
    let file = GridFile::load(path)?;
    let mut plan = file.plan()?;
    for cell in &mut plan.cells {
        opts.apply(&mut cell.config)?;
    }
    let out = opts.out_dir(&plan.output_dir);
    let grid = prepare_grid(&plan.cells[0].config, &opts.cache_dir())?;
    let configs: Vec<TrainConfig> = plan.cells.iter().map(|c| c.config.clone()).collect();
    let results = train_all(&configs, &grid, opts.jobs)?;

    let mut values = vec![vec![None; plan.col_labels.len()]; plan.row_labels.len()];
    let mut run_rows = Vec::new();
    for (cell, reports) in plan.cells.iter().zip(&results) {
        values[cell.row][cell.col] = aggregate(reports).ok().map(|a| a.l2.mean);
        let tag = format!("{}:{}", plan.row_labels[cell.row], plan.col_labels[cell.col]);
        run_rows.extend(reports.iter().map(|r| (tag.clone(), r)));
    }
    let kind = match file.grid {
        GridAxes::Points { .. } => "points",
        GridAxes::Architecture { .. } => "architecture",
        GridAxes::Lambda { .. } => "lambda",
    };
    let prefix = configs[0].problem.name();
    let mut written = Written::default();
    let csv = grid_csv(&plan.corner, &plan.row_labels, &plan.col_labels, &values);
    written.put(out.join(format!("{prefix}_grid_{kind}.csv")), &csv)?;
    written.put(out.join(format!("{prefix}_grid_{kind}_runs.csv")), &runs_csv(&run_rows))?;
    let failed = results.iter().flatten().filter(|r| !r.succeeded()).count();
    Ok((if failed > 0 { Outcome::Diverged { runs: failed } } else { Outcome::Success }, written))
}

// --- self-check -------------------------------------------------------------

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FD_PARAMS_PER_LAYER: usize = 20;
pub const MANUFACTURED_PDE_TOL: f64 = 1e-6;
pub const MANUFACTURED_CONDITION_TOL: f64 = 1e-10;
pub const BURGERS_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub fd_tolerance: f64,
    pub cache_dir: PathBuf,
    pub jobs: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { fd_tolerance: FD_TOLERANCE, cache_dir: PathBuf::from(DEFAULT_CACHE_DIR), jobs: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Every loss variant: the five weighting strategies and the plain NLL.
pub fn loss_variants() -> Vec<LossVariant> {
    vec![
        LossVariant::Strategy(WeightStrategy::M1),
        LossVariant::Strategy(WeightStrategy::M2 { c0: WeightStrategy::DEFAULT_C0 }),
        LossVariant::Strategy(WeightStrategy::M3),
        LossVariant::Strategy(WeightStrategy::M4 { beta: WeightStrategy::DEFAULT_BETA }),
        LossVariant::Strategy(WeightStrategy::M5 { lambda: WeightStrategy::DEFAULT_LAMBDA }),
        LossVariant::Nll,
    ]
}

/// Point counts for gradient checks: enough to touch every loss term while
/// keeping a 3 × 30 network fast.
pub const FD_COUNTS: Counts = Counts { collocation: 12, boundary: 6, initial: 6, extra: 6 };

fn fd_line(kind: ProblemKind, variant: LossVariant, tol: f64) -> CheckLine {
    let p = problem(kind);
    let arch = Architecture::uniform(p.dims(), 3, 30);
    let counts = Counts { initial: if p.t_max.is_some() { FD_COUNTS.initial } else { 0 }, ..FD_COUNTS };
    let name = format!("gradient {kind} {variant}");
    match fd_check_loss(&p, variant, &arch, &counts, 11, FD_PARAMS_PER_LAYER, FD_STEP, tol) {
        Ok(r) => CheckLine { name, pass: r.pass, detail: format!("max rel error {:e} (tol {tol:e})", r.max_rel_error) },
        Err(e) => CheckLine { name, pass: false, detail: e.to_string() },
    }
}

fn adam_line() -> CheckLine {
    let cfg = AdamConfig::default();
    let theta0 = vec![0.3, -1.2, 0.0, 2.5];
    let grads: Vec<Vec<f64>> =
        (0..10).map(|k| (0..4).map(|j| ((k * 4 + j) as f64 * 0.37).sin() * 10f64.powi(j as i32 - 2)).collect()).collect();
    let reference = adam_reference(&theta0, &grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut state = AdamState::new(theta0.len(), cfg);
    let mut theta = theta0;
    let mut worst: f64 = 0.0;
    for (g, want) in grads.iter().zip(&reference) {
        if let Err(e) = adam_step(&mut state, &mut theta, g) {
            return CheckLine { name: "adam reference".into(), pass: false, detail: e.to_string() };
        }
        worst = theta.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    CheckLine { name: "adam reference".into(), pass: worst < 1e-12, detail: format!("max deviation {worst:e} over 10 steps") }
}

fn manufactured_line(kind: ProblemKind) -> CheckLine {
    let name = format!("manufactured {kind}");
    match manufactured_residuals(&problem(kind), 200, 5) {
        Ok(r) => CheckLine {
            name,
            pass: r.max_pde < MANUFACTURED_PDE_TOL && r.max_condition < MANUFACTURED_CONDITION_TOL,
            detail: format!("pde {:e}, conditions {:e}", r.max_pde, r.max_condition),
        },
        Err(e) => CheckLine { name, pass: false, detail: e.to_string() },
    }
}

fn burgers_line(cache_dir: &Path) -> CheckLine {
    let name = "burgers reference".to_string();
    let (cached, status) = match BurgersReference::load_or_generate(cache_dir) {
        Ok(r) => r,
        Err(e) => return CheckLine { name, pass: false, detail: e.to_string() },
    };
    let low = BurgersReference::compute(BURGERS_ORDER / 2);
    let conv = cached.max_diff(&low);
    let nx = cached.x.len();
    let mut odd: f64 = 0.0;
    for i in 0..cached.t.len() {
        for j in 0..nx {
            odd = odd.max((cached.at(i, j) + cached.at(i, nx - 1 - j)).abs());
        }
    }
    let ic = (0..nx).map(|j| (cached.at(0, j) + (std::f64::consts::PI * cached.x[j]).sin()).abs()).fold(0.0, f64::max);
    let status = match status {
        CacheStatus::Loaded => "loaded",
        CacheStatus::Generated => "generated",
        CacheStatus::Regenerated => "regenerated",
    };
    CheckLine {
        name,
        pass: conv < BURGERS_TOL && odd < BURGERS_TOL && ic < BURGERS_TOL,
        detail: format!("cache {status}; orders 100/200 differ by {conv:e}, odd symmetry {odd:e}, initial condition {ic:e}"),
    }
}

/// Runs the oracle suite: gradient checks of every loss on every problem,
/// the Adam cross-check, manufactured-solution residuals and the Burgers
/// reference.
pub fn cmd_check(opts: &CheckOptions) -> Result<(Outcome, Vec<CheckLine>), BenchError> {
    let tasks: Vec<(ProblemKind, LossVariant)> =
        ProblemKind::ALL.iter().flat_map(|&k| loss_variants().into_iter().map(move |v| (k, v))).collect();
    let tol = opts.fd_tolerance;
    let mut lines: Vec<CheckLine> = pool(opts.jobs)?.install(|| tasks.par_iter().map(|&(k, v)| fd_line(k, v, tol)).collect());
    lines.push(adam_line());
    for p in catalog().iter().filter(|p| p.has_exact()) {
        lines.push(manufactured_line(p.kind));
    }
    lines.push(burgers_line(&opts.cache_dir));
    let failed = lines.iter().filter(|l| !l.pass).count();
    Ok((if failed == 0 { Outcome::Success } else { Outcome::ChecksFailed { failed } }, lines))
}
