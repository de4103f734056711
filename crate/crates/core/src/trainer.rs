//! Training loop, test metrics and multi-seed aggregation.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::diffcore::{Bindings, PointMap};
use crate::losses::{LossError, LossGraph, Objective, WeightStrategy};
use crate::mlp::{Architecture, NetError, NetParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::pde::{problem, Counts, ProblemKind};
use crate::sampler::{sample_training, TestGrid};

pub const DEFAULT_METRIC_INTERVAL: usize = 100;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const DEFAULT_TEST_POINTS: usize = 5000;
pub const DEFAULT_DATA_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metrics need equal nonzero lengths, got {predictions} predictions and {references} references")]
    Length { predictions: usize, references: usize },
    /// The reference has zero norm; the MSE is still reported.
    #[error("L2-error is undefined for a zero reference (MSE {mse:e})")]
    UndefinedL2 { mse: f64 },
    #[error("no successful runs to aggregate ({failed} failed)")]
    NoSuccessfulRuns { failed: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub problem: ProblemKind,
    pub strategy: WeightStrategy,
    pub counts: Counts,
    pub iterations: usize,
    pub hidden_layers: usize,
    pub neurons: usize,
    pub adam: AdamConfig,
    pub seeds: Vec<u64>,
    pub metric_interval: usize,
    /// Size of the evaluation grid (ignored for Burgers).
    pub test_points: usize,
    /// Seed of the training points, shared by every run so that seeds only
    /// change the initialisation.
    pub data_seed: u64,
    /// Fill `wall_ms`. Off by default so reports are reproducible.
    pub record_wall_clock: bool,
}

impl TrainConfig {
    /// The published settings of a benchmark: its point counts and
    /// iteration budget, a 3 × 30 tanh network and Adam at `1e-3`.
    pub fn published(kind: ProblemKind, strategy: WeightStrategy) -> TrainConfig {
        let p = problem(kind);
        TrainConfig {
            problem: kind,
            strategy,
            counts: p.published_counts,
            iterations: p.published_iterations,
            hidden_layers: 3,
            neurons: 30,
            adam: AdamConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            metric_interval: DEFAULT_METRIC_INTERVAL,
            test_points: DEFAULT_TEST_POINTS,
            data_seed: DEFAULT_DATA_SEED,
            record_wall_clock: false,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::uniform(problem(self.problem).dims(), self.hidden_layers, self.neurons)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.metric_interval == 0 {
            return bad("metric_interval must be at least 1");
        }
        if self.hidden_layers == 0 || self.neurons == 0 {
            return bad("the network needs at least one hidden layer of at least one neuron");
        }
        if self.counts.collocation == 0 {
            return bad("at least one collocation point is required");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("optimizer needs lr > 0, eps > 0 and betas in [0, 1)");
        }
        self.strategy.validate()?;
        Ok(())
    }
}

/// Losses and test metrics after `iteration` optimiser steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    /// `L_r`, `L_b`, `L_0`
    pub terms: [f64; 3],
    /// `L'_r`, `L'_b`, `L'_0`
    pub aux_terms: [f64; 3],
    pub mse: f64,
    pub l2: f64,
    /// Milliseconds since the start of training, 0 unless recorded.
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Non-finite loss or gradient at this iteration.
    Diverged { iteration: usize, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub seed: u64,
    /// Iteration 0 (the initial network), every metric interval, and the
    /// last iteration reached.
    pub checkpoints: Vec<Checkpoint>,
    pub status: RunStatus,
    /// Final parameters (the last finite ones for a diverged run).
    pub params: Vec<f64>,
    /// Mean head on the test grid at the final parameters.
    pub prediction: Vec<f64>,
    /// Variance head on the test grid at the final parameters.
    pub variance: Vec<f64>,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Completed
    }

    /// Final `(MSE, L2-error)` of a completed run.
    pub fn final_metrics(&self) -> Option<(f64, f64)> {
        match (&self.status, self.checkpoints.last()) {
            (RunStatus::Completed, Some(c)) => Some((c.mse, c.l2)),
            _ => None,
        }
    }
}

/// Mean, minimum and maximum of one statistic over runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Summary {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // rounding can push the mean of equal values outside [min, max]
        Summary { mean: mean.clamp(min, max), min, max }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub mse: Summary,
    pub l2: Summary,
    pub succeeded: usize,
    pub failed: usize,
}

impl AggregateReport {
    pub const ROW_LABELS: [&'static str; 6] =
        ["Mean MSE", "Mean L2-error", "Min MSE", "Min L2-error", "Max MSE", "Max L2-error"];

    /// The six statistics in [`Self::ROW_LABELS`] order.
    pub fn rows(&self) -> [f64; 6] {
        [self.mse.mean, self.l2.mean, self.mse.min, self.l2.min, self.mse.max, self.l2.max]
    }
}

/// `MSE = mean((û - u)^2)` and `L2 = ||û - u|| / ||u||`.
pub fn metrics(predictions: &[f64], references: &[f64]) -> Result<(f64, f64), MetricError> {
    if predictions.len() != references.len() || predictions.is_empty() {
        return Err(MetricError::Length { predictions: predictions.len(), references: references.len() });
    }
    let sq_err: f64 = predictions.iter().zip(references).map(|(p, r)| (p - r) * (p - r)).sum();
    let sq_ref: f64 = references.iter().map(|r| r * r).sum();
    let mse = sq_err / predictions.len() as f64;
    if sq_ref == 0.0 {
        return Err(MetricError::UndefinedL2 { mse });
    }
    Ok((mse, (sq_err / sq_ref).sqrt()))
}

/// Statistics of the final metrics over the successful runs.
pub fn aggregate(reports: &[RunReport]) -> Result<AggregateReport, MetricError> {
    let finals: Vec<(f64, f64)> = reports.iter().filter_map(RunReport::final_metrics).collect();
    let failed = reports.len() - finals.len();
    if finals.is_empty() {
        return Err(MetricError::NoSuccessfulRuns { failed });
    }
    let mse: Vec<f64> = finals.iter().map(|f| f.0).collect();
    let l2: Vec<f64> = finals.iter().map(|f| f.1).collect();
    Ok(AggregateReport { mse: Summary::of(&mse), l2: Summary::of(&l2), succeeded: finals.len(), failed })
}

/// Mean and variance heads evaluated on a test grid.
struct Predictor {
    map: PointMap,
    data: Vec<f64>,
}

impl Predictor {
    fn new(lg: &LossGraph, names: &[&str], grid: &TestGrid) -> Result<Predictor, TrainError> {
        let heads = lg.heads();
        let map = PointMap::new(lg.graph(), &[heads.mu(), heads.sigma2()], names).map_err(LossError::from)?;
        let data = if names.len() == 2 {
            grid.points().flat_map(|(t, x)| [t, x]).collect()
        } else {
            grid.points().map(|(_, x)| x).collect()
        };
        Ok(Predictor { map, data })
    }

    fn predict(&self, params: &[f64]) -> Result<(Vec<f64>, Vec<f64>), LossError> {
        let out = self.map.apply(&Bindings::new(params), &self.data)?;
        Ok((out.iter().step_by(2).copied().collect(), out.iter().skip(1).step_by(2).copied().collect()))
    }
}

type Snapshot = (Checkpoint, Vec<f64>, Vec<f64>);

fn snapshot(
    iteration: usize,
    params: &[f64],
    objective: &Objective,
    predictor: &Predictor,
    grid: &TestGrid,
    start: Option<Instant>,
) -> Result<Snapshot, String> {
    let t = objective.terms_at(params).map_err(|e| e.to_string())?;
    let (mu, s2) = predictor.predict(params).map_err(|e| e.to_string())?;
    let (mse, l2) = metrics(&mu, &grid.reference).map_err(|e| e.to_string())?;
    if !(mse.is_finite() && t.iter().all(|v| v.is_finite())) {
        return Err("non-finite loss or prediction".into());
    }
    let wall_ms = start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3);
    let c = Checkpoint { iteration, terms: [t[0], t[1], t[2]], aux_terms: [t[3], t[4], t[5]], mse, l2, wall_ms };
    Ok((c, mu, s2))
}

/// Trains one network. Divergence is reported in the returned
/// [`RunReport`]; errors are reserved for invalid inputs.
pub fn train(config: &TrainConfig, seed: u64, grid: &TestGrid) -> Result<RunReport, TrainError> {
    config.validate()?;
    if grid.is_empty() {
        return Err(TrainError::Config("empty test grid".into()));
    }
    let start = Instant::now();
    let pde = problem(config.problem);
    let arch = config.architecture();
    let mut params = NetParams::init_xavier(&arch, seed)?.to_flat();
    let points = sample_training(&pde, &config.counts, config.data_seed);
    let lg = LossGraph::build(&pde, &arch, &points)?;
    let predictor = Predictor::new(&lg, pde.input_names(), grid)?;
    let mut objective = Objective::new(lg, config.strategy)?;
    let mut adam = AdamState::new(params.len(), config.adam);

    let mut report = RunReport {
        seed,
        checkpoints: Vec::new(),
        status: RunStatus::Completed,
        params: Vec::new(),
        prediction: Vec::new(),
        variance: Vec::new(),
    };
    let record = |iteration: usize, params: &[f64], objective: &Objective| {
        snapshot(iteration, params, objective, &predictor, grid, config.record_wall_clock.then_some(start))
    };
    let mut last = match record(0, &params, &objective) {
        Ok(r) => r,
        Err(message) => {
            report.status = RunStatus::Diverged { iteration: 0, message };
            report.params = params;
            return Ok(report);
        }
    };
    report.checkpoints.push(last.0.clone());
    for k in 1..=config.iterations {
        let stepped = objective
            .step(&params)
            .map_err(|e| e.to_string())
            .and_then(|(_, grad)| adam_step(&mut adam, &mut params, &grad).map_err(|e| e.to_string()));
        if let Err(message) = stepped {
            report.status = RunStatus::Diverged { iteration: k, message };
            break;
        }
        if k % config.metric_interval == 0 || k == config.iterations {
            match record(k, &params, &objective) {
                Ok(r) => {
                    report.checkpoints.push(r.0.clone());
                    last = r;
                }
                Err(message) => {
                    report.status = RunStatus::Diverged { iteration: k, message };
                    break;
                }
            }
        }
    }
    report.params = params;
    report.prediction = last.1;
    report.variance = last.2;
    Ok(report)
}

/// Trains every seed of `config`, in parallel on the current rayon pool.
/// Reports come back in seed order.
pub fn train_seeds(config: &TrainConfig, grid: &TestGrid) -> Result<Vec<RunReport>, TrainError> {
    config.validate()?;
    config.seeds.par_iter().map(|&s| train(config, s, grid)).collect()
}
