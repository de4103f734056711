//! Experiment and grid configuration files.
//!
//! Both are TOML. Every section except the problem and the method list is
//! optional and defaults to the benchmark's published settings; unknown keys
//! are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::BenchError;
use crate::losses::WeightStrategy;
use crate::optim::AdamConfig;
use crate::pde::{Counts, ProblemKind};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CountsFile {
    pub collocation: Option<usize>,
    pub boundary: Option<usize>,
    pub initial: Option<usize>,
    pub extra: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetFile {
    pub hidden_layers: Option<usize>,
    pub neurons: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerFile {
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MethodParamsFile {
    /// M5 weight of the auxiliary loss.
    pub lambda: Option<f64>,
    /// M2 constant weight of the initial-condition term.
    pub c0: Option<f64>,
    /// M4 temperature.
    pub beta: Option<f64>,
}

/// An experiment file as written on disk.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub problem: ProblemKind,
    /// A single method (`m1` to `m5`).
    pub method: Option<String>,
    /// Several methods, for `compare`.
    pub methods: Option<Vec<String>>,
    pub iterations: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub metric_interval: Option<usize>,
    pub output_dir: Option<PathBuf>,
    /// Evaluation grid size (Burgers always uses its reference grid).
    pub test_points: Option<usize>,
    /// Seed of the training points (default 0); `seeds` only vary the
    /// initialisation.
    pub data_seed: Option<u64>,
    /// M4 on Poisson is excluded by default.
    pub allow_poisson_m4: Option<bool>,
    #[serde(default)]
    pub counts: CountsFile,
    #[serde(default)]
    pub net: NetFile,
    #[serde(default)]
    pub optimizer: OptimizerFile,
    #[serde(default)]
    pub method_params: MethodParamsFile,
}

/// A validated experiment: one training config per method.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub configs: Vec<TrainConfig>,
    pub output_dir: Option<PathBuf>,
}

impl Experiment {
    pub fn problem(&self) -> ProblemKind {
        self.configs[0].problem
    }
}

fn config_err(msg: impl Into<String>) -> BenchError {
    BenchError::Config(msg.into())
}

fn parse_method(label: &str, params: &MethodParamsFile) -> Result<WeightStrategy, BenchError> {
    let base = WeightStrategy::from_label(label)
        .ok_or_else(|| config_err(format!("unknown method '{label}' (expected m1 to m5)")))?;
    Ok(match base {
        WeightStrategy::M2 { .. } => WeightStrategy::M2 { c0: params.c0.unwrap_or(WeightStrategy::DEFAULT_C0) },
        WeightStrategy::M4 { .. } => WeightStrategy::M4 { beta: params.beta.unwrap_or(WeightStrategy::DEFAULT_BETA) },
        WeightStrategy::M5 { .. } => {
            WeightStrategy::M5 { lambda: params.lambda.unwrap_or(WeightStrategy::DEFAULT_LAMBDA) }
        }
        s => s,
    })
}

impl ExperimentFile {
    pub fn parse(text: &str) -> Result<ExperimentFile, BenchError> {
        toml::from_str(text).map_err(|e| config_err(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<ExperimentFile, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Method labels from `method` or `methods`, exactly one of which must
    /// be present.
    pub fn method_labels(&self) -> Result<Vec<String>, BenchError> {
        match (&self.method, &self.methods) {
            (Some(m), None) => Ok(vec![m.clone()]),
            (None, Some(ms)) => Ok(ms.clone()),
            (Some(_), Some(_)) => Err(config_err("give either 'method' or 'methods', not both")),
            (None, None) => Err(config_err("missing 'method'")),
        }
    }

    /// Checks the file and expands it into one training config per method.
    pub fn resolve(&self) -> Result<Experiment, BenchError> {
        let labels = self.method_labels()?;
        if labels.is_empty() {
            return Err(config_err("'methods' is empty"));
        }
        let mut seen = BTreeSet::new();
        let mut strategies = Vec::new();
        for l in &labels {
            let s = parse_method(l, &self.method_params)?;
            if !seen.insert(s.label()) {
                return Err(config_err(format!("method '{l}' is listed twice")));
            }
            strategies.push(s);
        }
        let has = |label: &str| seen.contains(label);
        let mp = &self.method_params;
        for (key, present, owner) in [("lambda", mp.lambda.is_some(), "m5"), ("c0", mp.c0.is_some(), "m2"), ("beta", mp.beta.is_some(), "m4")] {
            if present && !has(owner) {
                return Err(config_err(format!("method_params.{key} only applies to {owner}, which is not selected")));
            }
        }
        if self.problem == ProblemKind::Poisson && has("m4") && self.allow_poisson_m4 != Some(true) {
            return Err(config_err("m4 is excluded for poisson; set allow_poisson_m4 = true to run it anyway"));
        }

        let mut base = TrainConfig::published(self.problem, strategies[0]);
        let c = &self.counts;
        base.counts = Counts {
            collocation: c.collocation.unwrap_or(base.counts.collocation),
            boundary: c.boundary.unwrap_or(base.counts.boundary),
            initial: c.initial.unwrap_or(base.counts.initial),
            extra: c.extra.unwrap_or(base.counts.extra),
        };
        if self.problem != ProblemKind::Wave && base.counts.extra != 0 {
            return Err(config_err("counts.extra only applies to the wave problem"));
        }
        if self.problem == ProblemKind::Poisson && base.counts.initial != 0 {
            return Err(config_err("poisson has no initial condition; counts.initial must be 0"));
        }
        base.iterations = self.iterations.unwrap_or(base.iterations);
        base.hidden_layers = self.net.hidden_layers.unwrap_or(base.hidden_layers);
        base.neurons = self.net.neurons.unwrap_or(base.neurons);
        let d = AdamConfig::default();
        let o = &self.optimizer;
        base.adam = AdamConfig {
            lr: o.lr.unwrap_or(d.lr),
            beta1: o.beta1.unwrap_or(d.beta1),
            beta2: o.beta2.unwrap_or(d.beta2),
            eps: o.eps.unwrap_or(d.eps),
        };
        if let Some(seeds) = &self.seeds {
            base.seeds = seeds.clone();
            let unique: BTreeSet<_> = seeds.iter().collect();
            if unique.len() != seeds.len() {
                return Err(config_err("seeds must be distinct"));
            }
        }
        base.metric_interval = self.metric_interval.unwrap_or(base.metric_interval);
        base.test_points = self.test_points.unwrap_or(base.test_points);
        base.data_seed = self.data_seed.unwrap_or(base.data_seed);

        let configs: Vec<TrainConfig> = strategies
            .into_iter()
            .map(|strategy| TrainConfig { strategy, ..base.clone() })
            .collect();
        for cfg in &configs {
            cfg.validate().map_err(|e| config_err(e.to_string()))?;
        }
        if base.problem != ProblemKind::Burgers {
            let min = if base.problem == ProblemKind::Poisson { 2 } else { 4 };
            if base.test_points < min {
                return Err(config_err(format!("test_points must be at least {min}")));
            }
        }
        Ok(Experiment { configs, output_dir: self.output_dir.clone() })
    }
}

/// Axes of a parameter study, each cell trained with every seed.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridAxes {
    /// Rows: boundary and initial points per condition; columns: collocation points.
    Points { n_u: Vec<usize>, n_f: Vec<usize> },
    /// Rows: hidden layers; columns: neurons per layer.
    Architecture { hidden_layers: Vec<usize>, neurons: Vec<usize> },
    /// M5 auxiliary weights.
    Lambda { values: Vec<f64> },
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub base: ExperimentFile,
    pub grid: GridAxes,
}

/// One cell of a grid with its row and column labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPlan {
    /// Header of the label column, e.g. `N_u\N_f`.
    pub corner: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<GridCell>,
    pub output_dir: Option<PathBuf>,
}

impl GridFile {
    pub fn parse(text: &str) -> Result<GridFile, BenchError> {
        toml::from_str(text).map_err(|e| config_err(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<GridFile, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn plan(&self) -> Result<GridPlan, BenchError> {
        let exp = self.base.resolve()?;
        if exp.configs.len() != 1 {
            return Err(config_err("a grid base config must name a single method"));
        }
        let base = &exp.configs[0];
        let non_empty = |name: &str, len: usize| {
            if len == 0 {
                Err(config_err(format!("grid axis '{name}' is empty")))
            } else {
                Ok(())
            }
        };
        let mut cells = Vec::new();
        let (corner, row_labels, col_labels) = match &self.grid {
            GridAxes::Points { n_u, n_f } => {
                non_empty("n_u", n_u.len())?;
                non_empty("n_f", n_f.len())?;
                for (r, &nu) in n_u.iter().enumerate() {
                    for (c, &nf) in n_f.iter().enumerate() {
                        let mut cfg = base.clone();
                        cfg.counts.boundary = nu;
                        if cfg.problem != ProblemKind::Poisson {
                            cfg.counts.initial = nu;
                        }
                        cfg.counts.collocation = nf;
                        cells.push(GridCell { row: r, col: c, config: cfg });
                    }
                }
                ("N_u\\N_f", labels(n_u), labels(n_f))
            }
            GridAxes::Architecture { hidden_layers, neurons } => {
                non_empty("hidden_layers", hidden_layers.len())?;
                non_empty("neurons", neurons.len())?;
                for (r, &l) in hidden_layers.iter().enumerate() {
                    for (c, &n) in neurons.iter().enumerate() {
                        let mut cfg = base.clone();
                        cfg.hidden_layers = l;
                        cfg.neurons = n;
                        cells.push(GridCell { row: r, col: c, config: cfg });
                    }
                }
                ("hidden_layers\\neurons", labels(hidden_layers), labels(neurons))
            }
            GridAxes::Lambda { values } => {
                non_empty("values", values.len())?;
                if !matches!(base.strategy, WeightStrategy::M5 { .. }) {
                    return Err(config_err("a lambda grid needs method = \"m5\""));
                }
                if self.base.method_params.lambda.is_some() {
                    return Err(config_err("method_params.lambda is set by the lambda grid"));
                }
                for (c, &lambda) in values.iter().enumerate() {
                    let mut cfg = base.clone();
                    cfg.strategy = WeightStrategy::M5 { lambda };
                    cells.push(GridCell { row: 0, col: c, config: cfg });
                }
                ("lambda", vec!["L2-error".to_string()], values.iter().map(|v| super::output::fmt_f64(*v)).collect())
            }
        };
        for cell in &cells {
            cell.config.validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(GridPlan { corner: corner.to_string(), row_labels, col_labels, cells, output_dir: exp.output_dir })
    }
}

fn labels(v: &[usize]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}
