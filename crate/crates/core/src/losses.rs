//! Loss terms and weighting strategies.
//!
//! A [`LossGraph`] holds, for one network architecture and one fixed point
//! set, the mean-squared terms `L_r`, `L_b`, `L_0`, their variance-aware
//! counterparts `L'_r`, `L'_b`, `L'_0`, and the plain Gaussian NLL. Every term
//! is a batch mean over its point set, so one graph serves the whole run.
//! Condition targets are bound per point through the `target` column.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{Bindings, DiffError, Evaluator, ExprNode, Graph};
use crate::mlp::{self, Architecture, HeadOutputs, NetError};
use crate::pde::{ConditionKind, PdeError, PdeProblem};
use crate::sampler::{CondPoint, PointSet};

/// Floor applied to term values before the residual-proportional weights
/// divide by them.
pub const M3_FLOOR: f64 = 1e-12;

/// Input leaves carrying detached per-term weights.
pub const WEIGHT_INPUTS: [&str; 3] = ["w_r", "w_b", "w_0"];
/// Column carrying each condition point's target value.
pub const TARGET_INPUT: &str = "target";

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite loss or gradient: {0}")]
    Divergence(DiffError),
    #[error("the collocation set is empty")]
    NoCollocation,
    #[error("invalid strategy: {0}")]
    Strategy(String),
    #[error(transparent)]
    Graph(DiffError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Net(#[from] NetError),
}

impl From<DiffError> for LossError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::NonFinite | DiffError::NonFiniteGradient { .. } => LossError::Divergence(e),
            other => LossError::Graph(other),
        }
    }
}

/// Loss weighting method.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightStrategy {
    /// `L_r + L_b + L_0`.
    M1,
    /// Initial term scaled by a large constant.
    M2 { c0: f64 },
    /// Weights proportional to the current term values, smallest normalised to 1.
    M3,
    /// SoftAdapt: softmax of the per-term change since the previous step.
    M4 { beta: f64 },
    /// `L + lambda * L'`.
    M5 { lambda: f64 },
}

impl WeightStrategy {
    pub const DEFAULT_C0: f64 = 100.0;
    pub const DEFAULT_BETA: f64 = 0.1;
    pub const DEFAULT_LAMBDA: f64 = 1.0;

    pub fn label(&self) -> &'static str {
        match self {
            WeightStrategy::M1 => "m1",
            WeightStrategy::M2 { .. } => "m2",
            WeightStrategy::M3 => "m3",
            WeightStrategy::M4 { .. } => "m4",
            WeightStrategy::M5 { .. } => "m5",
        }
    }

    /// Strategy `m1`..`m5` with default parameters.
    pub fn from_label(label: &str) -> Option<WeightStrategy> {
        Some(match label {
            "m1" => WeightStrategy::M1,
            "m2" => WeightStrategy::M2 { c0: Self::DEFAULT_C0 },
            "m3" => WeightStrategy::M3,
            "m4" => WeightStrategy::M4 { beta: Self::DEFAULT_BETA },
            "m5" => WeightStrategy::M5 { lambda: Self::DEFAULT_LAMBDA },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            WeightStrategy::M2 { c0 } if !(c0 > 0.0 && c0.is_finite()) => {
                Err(LossError::Strategy(format!("c0 must be positive, got {c0}")))
            }
            WeightStrategy::M4 { beta } if !beta.is_finite() => {
                Err(LossError::Strategy(format!("beta must be finite, got {beta}")))
            }
            WeightStrategy::M5 { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => {
                Err(LossError::Strategy(format!("lambda must be non-negative, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Whether the weights depend on the current term values.
    pub fn is_adaptive(&self) -> bool {
        matches!(self, WeightStrategy::M3 | WeightStrategy::M4 { .. })
    }
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Term values from the previous optimisation step (used by M4).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub previous: Option<[f64; 3]>,
}

/// Term values at one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_b: f64,
    pub l_0: f64,
    pub lp_r: f64,
    pub lp_b: f64,
    pub lp_0: f64,
    pub total_value: f64,
    pub total: ExprNode,
    /// Weights applied to `L_r`, `L_b`, `L_0`.
    pub weights: [f64; 3],
    /// Weight applied to each of `L'_r`, `L'_b`, `L'_0`.
    pub aux_weight: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 3] {
        [self.l_r, self.l_b, self.l_0]
    }

    pub fn aux_terms(&self) -> [f64; 3] {
        [self.lp_r, self.lp_b, self.lp_0]
    }
}

/// Per-point residual expressions of one point set.
struct SetBodies {
    sq: ExprNode,
    mnll: ExprNode,
    nll: ExprNode,
}

pub struct LossGraph {
    graph: Graph,
    heads: HeadOutputs,
    inputs: Vec<ExprNode>,
    terms: [ExprNode; 3],
    aux: [ExprNode; 3],
    nll: ExprNode,
    active: [bool; 3],
    weight_leaves: [ExprNode; 3],
}

/// `log(s + 1) + r^2 / s`
fn mnll_body(g: &mut Graph, sq: ExprNode, s2: ExprNode) -> ExprNode {
    let one = g.constant(1.0);
    let s1 = g.add(s2, one);
    let l = g.log(s1);
    let q = g.div(sq, s2);
    g.add(l, q)
}

/// `0.5 log s + r^2 / (2 s)`
fn nll_body(g: &mut Graph, sq: ExprNode, s2: ExprNode) -> ExprNode {
    let l = g.log(s2);
    let q = g.div(sq, s2);
    let hl = g.scale(0.5, l);
    let hq = g.scale(0.5, q);
    g.add(hl, hq)
}

impl LossGraph {
    pub fn build(problem: &PdeProblem, arch: &Architecture, points: &PointSet) -> Result<LossGraph, LossError> {
        if points.collocation.is_empty() {
            return Err(LossError::NoCollocation);
        }
        let mut g = Graph::new();
        let names = problem.input_names();
        let inputs: Vec<ExprNode> = names.iter().map(|n| g.input(n)).collect();
        let heads = mlp::forward(arch, &mut g, &inputs)?;
        Self::assemble(g, problem, heads, inputs, points)
    }

    /// Builds the terms around caller-supplied heads over leaves named as
    /// the problem's inputs. Used to check the loss algebra against pinned
    /// means and variances.
    pub fn with_heads(
        mut graph: Graph,
        problem: &PdeProblem,
        heads: HeadOutputs,
        points: &PointSet,
    ) -> Result<LossGraph, LossError> {
        let inputs: Vec<ExprNode> = problem.input_names().iter().map(|n| graph.input(n)).collect();
        Self::assemble(graph, problem, heads, inputs, points)
    }

    fn assemble(
        mut g: Graph,
        problem: &PdeProblem,
        heads: HeadOutputs,
        inputs: Vec<ExprNode>,
        points: &PointSet,
    ) -> Result<LossGraph, LossError> {
        let names = problem.input_names();
        let target = g.input(TARGET_INPUT);
        let s2 = heads.sigma2();

        let bodies = |g: &mut Graph, r: ExprNode| {
            let sq = g.powi(r, 2);
            SetBodies { sq, mnll: mnll_body(g, sq, s2), nll: nll_body(g, sq, s2) }
        };

        let r = problem.residual(&mut g, &heads, &inputs)?;
        let coll = bodies(&mut g, r);
        let coll_data: Vec<f64> = if names.len() == 2 {
            points.collocation.iter().flat_map(|&(t, x)| [t, x]).collect()
        } else {
            points.collocation.iter().map(|&(_, x)| x).collect()
        };
        let coll_batch = g.add_batch(names, &coll_data)?;

        let mut cond_cols: Vec<&str> = names.to_vec();
        cond_cols.push(TARGET_INPUT);
        let cond_data = |pts: &[CondPoint]| -> Vec<f64> {
            pts.iter()
                .flat_map(|p| if names.len() == 2 { vec![p.t, p.x, p.target] } else { vec![p.x, p.target] })
                .collect()
        };

        let find = |kind: ConditionKind| problem.conditions.iter().find(|c| c.kind == kind);
        let set_terms = |g: &mut Graph, kind: ConditionKind, pts: &[CondPoint]| -> Result<Option<[ExprNode; 3]>, LossError> {
            let Some(spec) = find(kind) else { return Ok(None) };
            if pts.is_empty() {
                return Ok(None);
            }
            let r = problem.condition_expr(g, spec, &heads, target)?;
            let b = bodies(g, r);
            let batch = g.add_batch(&cond_cols, &cond_data(pts))?;
            Ok(Some([g.batch_mean(b.sq, batch)?, g.batch_mean(b.mnll, batch)?, g.batch_mean(b.nll, batch)?]))
        };
        let bnd = set_terms(&mut g, ConditionKind::Boundary, &points.boundary)?;
        let init = set_terms(&mut g, ConditionKind::Initial, &points.initial)?;
        let extra = set_terms(&mut g, ConditionKind::InitialDerivative, &points.extra)?;

        let rr = [
            g.batch_mean(coll.sq, coll_batch)?,
            g.batch_mean(coll.mnll, coll_batch)?,
            g.batch_mean(coll.nll, coll_batch)?,
        ];
        let zero = g.constant(0.0);
        let pick = |t: &Option<[ExprNode; 3]>, k: usize| t.map_or(zero, |v| v[k]);
        let add = |g: &mut Graph, a: ExprNode, b: ExprNode| g.add(a, b);

        let l_0 = {
            let (a, b) = (pick(&init, 0), pick(&extra, 0));
            add(&mut g, a, b)
        };
        let lp_0 = {
            let (a, b) = (pick(&init, 1), pick(&extra, 1));
            add(&mut g, a, b)
        };
        let nll_parts = [rr[2], pick(&bnd, 2), pick(&init, 2), pick(&extra, 2)];
        let nll = g.sum(&nll_parts);
        let weight_leaves = WEIGHT_INPUTS.map(|n| g.input(n));
        Ok(LossGraph {
            terms: [rr[0], pick(&bnd, 0), l_0],
            aux: [rr[1], pick(&bnd, 1), lp_0],
            nll,
            active: [true, bnd.is_some(), init.is_some() || extra.is_some()],
            weight_leaves,
            graph: g,
            heads,
            inputs,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn heads(&self) -> HeadOutputs {
        self.heads
    }

    pub fn inputs(&self) -> &[ExprNode] {
        &self.inputs
    }

    /// `[L_r, L_b, L_0]`.
    pub fn terms(&self) -> [ExprNode; 3] {
        self.terms
    }

    /// `[L'_r, L'_b, L'_0]`.
    pub fn aux_terms(&self) -> [ExprNode; 3] {
        self.aux
    }

    pub fn nll(&self) -> ExprNode {
        self.nll
    }

    /// Which of the three terms have a nonempty point set.
    pub fn active(&self) -> [bool; 3] {
        self.active
    }

    pub fn vanilla_total(&mut self) -> ExprNode {
        let t = self.terms;
        self.graph.sum(&t)
    }

    pub fn aux_total(&mut self) -> ExprNode {
        let t = self.aux;
        self.graph.sum(&t)
    }

    /// Total loss node of a strategy. Adaptive strategies multiply each term
    /// by a weight input leaf, so no gradient flows through the weights.
    pub fn total(&mut self, strategy: &WeightStrategy) -> ExprNode {
        let [lr, lb, l0] = self.terms;
        let g = &mut self.graph;
        match *strategy {
            WeightStrategy::M1 => g.sum(&[lr, lb, l0]),
            WeightStrategy::M2 { c0 } => {
                let s = g.scale(c0, l0);
                g.sum(&[lr, lb, s])
            }
            WeightStrategy::M3 | WeightStrategy::M4 { .. } => {
                let parts: Vec<ExprNode> = (0..3)
                    .filter(|&i| self.active[i])
                    .map(|i| g.mul(self.weight_leaves[i], self.terms[i]))
                    .collect();
                g.sum(&parts)
            }
            WeightStrategy::M5 { lambda } => {
                let l = g.sum(&[lr, lb, l0]);
                let aux = g.sum(&self.aux);
                let scaled = g.scale(lambda, aux);
                g.add(l, scaled)
            }
        }
    }

    pub fn evaluator(&self, roots: &[ExprNode]) -> Result<Evaluator, LossError> {
        Ok(self.graph.evaluator(roots)?)
    }

    /// Adds the weight leaves to a parameter binding.
    pub fn bindings<'a>(&self, params: &'a [f64], weights: [f64; 3]) -> Bindings<'a> {
        let mut b = Bindings::new(params);
        for (name, w) in WEIGHT_INPUTS.iter().zip(weights) {
            b.set(name, w);
        }
        b
    }
}

/// Term weights for `current` term values. Inactive terms get weight 0.
pub fn strategy_weights(
    strategy: &WeightStrategy,
    current: [f64; 3],
    active: [bool; 3],
    history: &LossHistory,
) -> ([f64; 3], f64) {
    let mut w = [0.0; 3];
    match *strategy {
        WeightStrategy::M1 => return ([1.0; 3], 0.0),
        WeightStrategy::M2 { c0 } => return ([1.0, 1.0, c0], 0.0),
        WeightStrategy::M5 { lambda } => return ([1.0; 3], lambda),
        WeightStrategy::M3 => {
            let floored = current.map(|v| v.max(M3_FLOOR));
            let min = (0..3).filter(|&i| active[i]).map(|i| floored[i]).fold(f64::INFINITY, f64::min);
            for i in (0..3).filter(|&i| active[i]) {
                w[i] = floored[i] / min;
            }
        }
        WeightStrategy::M4 { beta } => {
            let n = active.iter().filter(|&&a| a).count() as f64;
            match history.previous {
                None => {
                    for i in (0..3).filter(|&i| active[i]) {
                        w[i] = 1.0 / n;
                    }
                }
                Some(prev) => {
                    let s: Vec<f64> = (0..3).map(|i| beta * (current[i] - prev[i])).collect();
                    let max = (0..3).filter(|&i| active[i]).map(|i| s[i]).fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = (0..3).map(|i| if active[i] { (s[i] - max).exp() } else { 0.0 }).collect();
                    let z: f64 = e.iter().sum();
                    for i in 0..3 {
                        w[i] = e[i] / z;
                    }
                }
            }
        }
    }
    (w, 0.0)
}

fn term_values(lg: &LossGraph, params: &[f64]) -> Result<[f64; 6], LossError> {
    let mut roots = lg.terms.to_vec();
    roots.extend_from_slice(&lg.aux);
    let v = lg.evaluator(&roots)?.values(&lg.bindings(params, [0.0; 3]))?;
    Ok([v[0], v[1], v[2], v[3], v[4], v[5]])
}

fn breakdown(v: [f64; 6], total_value: f64, total: ExprNode, weights: [f64; 3], aux_weight: f64) -> LossBreakdown {
    LossBreakdown {
        l_r: v[0],
        l_b: v[1],
        l_0: v[2],
        lp_r: v[3],
        lp_b: v[4],
        lp_0: v[5],
        total_value,
        total,
        weights,
        aux_weight,
    }
}

/// Vanilla loss `L_r + L_b + L_0`.
pub fn vanilla_loss(lg: &mut LossGraph, params: &[f64]) -> Result<LossBreakdown, LossError> {
    assemble_total(&WeightStrategy::M1, lg, params, &LossHistory::default())
}

/// Gaussian negative log-likelihood summed over the point sets.
pub fn nll_loss(lg: &LossGraph, params: &[f64]) -> Result<f64, LossError> {
    Ok(lg.evaluator(&[lg.nll])?.values(&Bindings::new(params))?[0])
}

/// `[L'_r, L'_b, L'_0]` and the node of their sum.
pub fn mnll_loss(lg: &mut LossGraph, params: &[f64]) -> Result<([f64; 3], ExprNode), LossError> {
    let v = lg.evaluator(&lg.aux)?.values(&Bindings::new(params))?;
    Ok(([v[0], v[1], v[2]], lg.aux_total()))
}

/// Evaluates every term and the strategy's total at `params`.
pub fn assemble_total(
    strategy: &WeightStrategy,
    lg: &mut LossGraph,
    params: &[f64],
    history: &LossHistory,
) -> Result<LossBreakdown, LossError> {
    strategy.validate()?;
    let v = term_values(lg, params)?;
    let (weights, aux_weight) = strategy_weights(strategy, [v[0], v[1], v[2]], lg.active, history);
    let total = lg.total(strategy);
    let total_value = lg.evaluator(&[total])?.values(&lg.bindings(params, weights))?[0];
    Ok(breakdown(v, total_value, total, weights, aux_weight))
}

/// A strategy's total loss compiled for repeated gradient evaluation.
pub struct Objective {
    lg: LossGraph,
    strategy: WeightStrategy,
    total: ExprNode,
    /// Roots: total, the three terms, the three auxiliary terms.
    eval: Evaluator,
    /// The three terms alone, for adaptive weights.
    terms_eval: Option<Evaluator>,
    history: LossHistory,
}

impl Objective {
    pub fn new(mut lg: LossGraph, strategy: WeightStrategy) -> Result<Objective, LossError> {
        strategy.validate()?;
        let total = lg.total(&strategy);
        let mut roots = vec![total];
        roots.extend_from_slice(&lg.terms);
        roots.extend_from_slice(&lg.aux);
        let eval = lg.evaluator(&roots)?;
        let terms_eval = if strategy.is_adaptive() { Some(lg.evaluator(&lg.terms)?) } else { None };
        Ok(Objective { lg, strategy, total, eval, terms_eval, history: LossHistory::default() })
    }

    pub fn loss_graph(&self) -> &LossGraph {
        &self.lg
    }

    pub fn strategy(&self) -> WeightStrategy {
        self.strategy
    }

    pub fn total_node(&self) -> ExprNode {
        self.total
    }

    pub fn history(&self) -> &LossHistory {
        &self.history
    }

    fn weights(&self, params: &[f64]) -> Result<([f64; 3], f64), LossError> {
        let current = match &self.terms_eval {
            Some(ev) => {
                let v = ev.values(&Bindings::new(params))?;
                [v[0], v[1], v[2]]
            }
            None => [0.0; 3],
        };
        Ok(strategy_weights(&self.strategy, current, self.lg.active, &self.history))
    }

    /// Loss breakdown and gradient of the total at `params`. Advances the
    /// term history used by SoftAdapt.
    pub fn step(&mut self, params: &[f64]) -> Result<(LossBreakdown, Vec<f64>), LossError> {
        let (weights, aux_weight) = self.weights(params)?;
        let b = self.lg.bindings(params, weights);
        let mut seeds = vec![0.0; 7];
        seeds[0] = 1.0;
        let ev = self.eval.gradient(&b, &seeds)?;
        let v = &ev.values;
        let terms = [v[1], v[2], v[3], v[4], v[5], v[6]];
        self.history.previous = Some([v[1], v[2], v[3]]);
        Ok((breakdown(terms, v[0], self.total, weights, aux_weight), ev.grad))
    }

    /// `[L_r, L_b, L_0, L'_r, L'_b, L'_0]` at `params`; does not touch the
    /// history.
    pub fn terms_at(&self, params: &[f64]) -> Result<[f64; 6], LossError> {
        let v = self.eval.values(&self.lg.bindings(params, [1.0; 3]))?;
        Ok([v[1], v[2], v[3], v[4], v[5], v[6]])
    }

    /// Total loss value at `params` with the weights held at `weights`.
    pub fn value_with_weights(&self, params: &[f64], weights: [f64; 3]) -> Result<f64, LossError> {
        Ok(self.eval.values(&self.lg.bindings(params, weights))?[0])
    }

    /// Gradient of the total with the weights held at `weights`.
    pub fn gradient_with_weights(&self, params: &[f64], weights: [f64; 3]) -> Result<Vec<f64>, LossError> {
        let mut seeds = vec![0.0; 7];
        seeds[0] = 1.0;
        Ok(self.eval.gradient(&self.lg.bindings(params, weights), &seeds)?.grad)
    }
}
