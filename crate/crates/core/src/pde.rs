//! The benchmark problems: domains, residual operators, boundary and initial
//! conditions, and exact solutions where one is known in closed form.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, ExprNode, Graph};
use crate::mlp::HeadOutputs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error("{problem} has no closed-form solution; use the Cole-Hopf reference in the oracle module")]
    OracleOnly { problem: ProblemKind },
    #[error("{problem} expects {expected} input leaves, got {got}")]
    Dimension { problem: ProblemKind, expected: usize, got: usize },
    #[error("point (t={t}, x={x}) is not on the condition locus")]
    OffLocus { t: f64, x: f64 },
    #[error("unknown problem '{0}' (expected advection, burgers, convection_diffusion, poisson or wave)")]
    UnknownProblem(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Advection,
    Burgers,
    ConvectionDiffusion,
    Poisson,
    Wave,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 5] = [
        ProblemKind::Advection,
        ProblemKind::Burgers,
        ProblemKind::ConvectionDiffusion,
        ProblemKind::Poisson,
        ProblemKind::Wave,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Advection => "advection",
            ProblemKind::Burgers => "burgers",
            ProblemKind::ConvectionDiffusion => "convection_diffusion",
            ProblemKind::Poisson => "poisson",
            ProblemKind::Wave => "wave",
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = PdeError;
    fn from_str(s: &str) -> Result<Self, PdeError> {
        ProblemKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| PdeError::UnknownProblem(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionKind {
    Boundary,
    Initial,
    /// `∂u/∂t(0, x) = h(x)`.
    InitialDerivative,
}

/// Where a condition's points live.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Locus {
    /// `x` pinned, `t` uniform over `[0, T]`.
    Edge { x: f64 },
    /// `t = 0`, `x` uniform over the spatial interval.
    InitialLine,
    /// A single spatial point of a stationary problem.
    Point { x: f64 },
}

/// Which point budget a condition draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountKey {
    Boundary,
    Initial,
    Extra,
}

#[derive(Clone, Copy, Debug)]
pub struct ConditionSpec {
    pub kind: ConditionKind,
    pub locus: Locus,
    pub count: CountKey,
    target: fn(f64, f64) -> f64,
}

impl ConditionSpec {
    pub fn target(&self, t: f64, x: f64) -> f64 {
        (self.target)(t, x)
    }

    /// Whether `(t, x)` lies on the locus (to 1e-12). Stationary problems
    /// ignore `t`.
    pub fn contains(&self, t: f64, x: f64, t_max: Option<f64>) -> bool {
        const TOL: f64 = 1e-12;
        let t_ok = |t: f64| t_max.is_none_or(|tm| (-TOL..=tm + TOL).contains(&t));
        match self.locus {
            Locus::Edge { x: xe } => (x - xe).abs() <= TOL && t_ok(t),
            Locus::InitialLine => t.abs() <= TOL,
            Locus::Point { x: xp } => (x - xp).abs() <= TOL,
        }
    }
}

/// Point budgets of the published experiment for a problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub collocation: usize,
    pub boundary: usize,
    pub initial: usize,
    #[serde(default)]
    pub extra: usize,
}

#[derive(Clone, Debug)]
pub struct PdeProblem {
    pub kind: ProblemKind,
    pub x_lo: f64,
    pub x_hi: f64,
    /// `None` for stationary problems.
    pub t_max: Option<f64>,
    pub conditions: Vec<ConditionSpec>,
    /// Counts and iteration budget of the reference experiment.
    pub published_counts: Counts,
    pub published_iterations: usize,
}

// Problem constants.
const CD_C: f64 = 4.0;
const CD_MU: f64 = 0.05;
const CD_L: f64 = 4.0;
const WAVE_L: f64 = 4.0;
const WAVE_T: f64 = 2.0;
const WAVE_C2: f64 = 3.0;

fn burgers_nu() -> f64 {
    0.01 / PI
}

fn poisson_l() -> f64 {
    2.0 * PI.sqrt()
}

fn zero(_t: f64, _x: f64) -> f64 {
    0.0
}

fn sech(z: f64) -> f64 {
    1.0 / z.cosh()
}

pub fn catalog() -> Vec<PdeProblem> {
    ProblemKind::ALL.into_iter().map(problem).collect()
}

pub fn problem(kind: ProblemKind) -> PdeProblem {
    use ConditionKind::*;
    use CountKey as K;
    let edge = |x: f64, target: fn(f64, f64) -> f64| ConditionSpec {
        kind: Boundary,
        locus: Locus::Edge { x },
        count: K::Boundary,
        target,
    };
    let init = |target: fn(f64, f64) -> f64| ConditionSpec {
        kind: Initial,
        locus: Locus::InitialLine,
        count: K::Initial,
        target,
    };
    match kind {
        ProblemKind::Advection => PdeProblem {
            kind,
            x_lo: 0.0,
            x_hi: 1.0,
            t_max: Some(0.5),
            conditions: vec![
                edge(0.0, |t, _| -2.0 * (PI * t).sin()),
                edge(1.0, |t, _| 2.0 * (PI * t).sin()),
                init(|_, x| 2.0 * (PI * x).sin()),
            ],
            published_counts: Counts { collocation: 500, boundary: 100, initial: 100, extra: 0 },
            published_iterations: 8000,
        },
        ProblemKind::Burgers => PdeProblem {
            kind,
            x_lo: -1.0,
            x_hi: 1.0,
            t_max: Some(1.0),
            conditions: vec![edge(-1.0, zero), edge(1.0, zero), init(|_, x| -(PI * x).sin())],
            published_counts: Counts { collocation: 5000, boundary: 500, initial: 500, extra: 0 },
            published_iterations: 15000,
        },
        ProblemKind::ConvectionDiffusion => PdeProblem {
            kind,
            x_lo: -CD_L,
            x_hi: CD_L,
            t_max: Some(1.0),
            conditions: vec![edge(-CD_L, zero), edge(CD_L, zero), init(|_, x| conv_diff_exact(0.0, x))],
            published_counts: Counts { collocation: 1000, boundary: 100, initial: 100, extra: 0 },
            published_iterations: 20000,
        },
        ProblemKind::Poisson => {
            let l = poisson_l();
            let point = |x: f64| ConditionSpec {
                kind: Boundary,
                locus: Locus::Point { x },
                count: K::Boundary,
                target: zero,
            };
            PdeProblem {
                kind,
                x_lo: -l,
                x_hi: l,
                t_max: None,
                conditions: vec![point(-l), point(l)],
                published_counts: Counts { collocation: 2500, boundary: 2, initial: 0, extra: 0 },
                published_iterations: 10000,
            }
        }
        ProblemKind::Wave => PdeProblem {
            kind,
            x_lo: -WAVE_L,
            x_hi: WAVE_L,
            t_max: Some(WAVE_T),
            conditions: vec![
                edge(-WAVE_L, zero),
                edge(WAVE_L, zero),
                init(|_, x| sech(2.0 * x) - 0.5 * sech(2.0 * (x - 2.0 * WAVE_L)) - 0.5 * sech(2.0 * (x + 2.0 * WAVE_L))),
                ConditionSpec { kind: InitialDerivative, locus: Locus::InitialLine, count: K::Extra, target: zero },
            ],
            published_counts: Counts { collocation: 2000, boundary: 200, initial: 200, extra: 200 },
            published_iterations: 15000,
        },
    }
}

fn conv_diff_exact(t: f64, x: f64) -> f64 {
    let s = (t + 0.1) * CD_MU;
    0.1 / s.sqrt() * (-(x + 2.0 - CD_C * t).powi(2) / (4.0 * s)).exp()
}

fn wave_exact(t: f64, x: f64) -> f64 {
    let c = WAVE_C2.sqrt() * t;
    let l2 = 2.0 * WAVE_L;
    0.5 * sech(2.0 * (x - c)) - 0.5 * sech(2.0 * (x - l2 + c)) + 0.5 * sech(2.0 * (x + c))
        - 0.5 * sech(2.0 * (x + l2 - c))
}

impl PdeProblem {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Number of input leaves: 2 (`t`, `x`) or 1 (`x`).
    pub fn dims(&self) -> usize {
        if self.t_max.is_some() {
            2
        } else {
            1
        }
    }

    pub fn input_names(&self) -> &'static [&'static str] {
        if self.t_max.is_some() {
            &["t", "x"]
        } else {
            &["x"]
        }
    }

    pub fn has_exact(&self) -> bool {
        self.kind != ProblemKind::Burgers
    }

    pub fn boundary_conditions(&self) -> impl Iterator<Item = &ConditionSpec> {
        self.conditions.iter().filter(|c| c.count == CountKey::Boundary)
    }

    /// Closed-form solution.
    pub fn exact(&self, t: f64, x: f64) -> Result<f64, PdeError> {
        Ok(match self.kind {
            ProblemKind::Advection => 2.0 * (PI * (x - t)).sin(),
            ProblemKind::Burgers => return Err(PdeError::OracleOnly { problem: self.kind }),
            ProblemKind::ConvectionDiffusion => conv_diff_exact(t, x),
            ProblemKind::Poisson => (x * x).sin(),
            ProblemKind::Wave => wave_exact(t, x),
        })
    }

    /// The exact solution as an expression over the given input leaves.
    pub fn exact_expr(&self, g: &mut Graph, inputs: &[ExprNode]) -> Result<ExprNode, PdeError> {
        self.check_dims(inputs)?;
        Ok(match self.kind {
            ProblemKind::Burgers => return Err(PdeError::OracleOnly { problem: self.kind }),
            ProblemKind::Advection => {
                let (t, x) = (inputs[0], inputs[1]);
                let d = g.sub(x, t);
                let a = g.scale(PI, d);
                let s = g.sin(a);
                g.scale(2.0, s)
            }
            ProblemKind::ConvectionDiffusion => {
                let (t, x) = (inputs[0], inputs[1]);
                let c01 = g.constant(0.1);
                let tp = g.add(t, c01);
                let s = g.scale(CD_MU, tp);
                let root = g.sqrt(s);
                let pref = g.div(c01, root);
                let two = g.constant(2.0);
                let ct = g.scale(CD_C, t);
                let x2 = g.add(x, two);
                let shift = g.sub(x2, ct);
                let sq = g.powi(shift, 2);
                let den = g.scale(4.0, s);
                let q = g.div(sq, den);
                let nq = g.neg(q);
                let e = g.exp(nq);
                g.mul(pref, e)
            }
            ProblemKind::Poisson => {
                let x2 = g.powi(inputs[0], 2);
                g.sin(x2)
            }
            ProblemKind::Wave => {
                let (t, x) = (inputs[0], inputs[1]);
                let ct = g.scale(WAVE_C2.sqrt(), t);
                let l2 = g.constant(2.0 * WAVE_L);
                let half_sech = |g: &mut Graph, z: ExprNode, sign: f64| {
                    let z2 = g.scale(2.0, z);
                    let c = g.cosh(z2);
                    let k = g.constant(0.5 * sign);
                    g.div(k, c)
                };
                let a = g.sub(x, ct);
                let xm = g.sub(x, l2);
                let b = g.add(xm, ct);
                let c = g.add(x, ct);
                let xp = g.add(x, l2);
                let d = g.sub(xp, ct);
                let terms = [
                    half_sech(g, a, 1.0),
                    half_sech(g, b, -1.0),
                    half_sech(g, c, 1.0),
                    half_sech(g, d, -1.0),
                ];
                g.sum(&terms)
            }
        })
    }

    fn check_dims(&self, inputs: &[ExprNode]) -> Result<(), PdeError> {
        if inputs.len() != self.dims() {
            return Err(PdeError::Dimension { problem: self.kind, expected: self.dims(), got: inputs.len() });
        }
        Ok(())
    }

    /// PDE residual `N[u] - f` of the mean head over the input leaves
    /// (`[t, x]`, or `[x]` for Poisson).
    pub fn residual(&self, g: &mut Graph, heads: &HeadOutputs, inputs: &[ExprNode]) -> Result<ExprNode, PdeError> {
        self.check_dims(inputs)?;
        let u = heads.mu();
        Ok(match self.kind {
            ProblemKind::Advection => {
                let ut = g.d(u, "t", 1)?;
                let ux = g.d(u, "x", 1)?;
                g.add(ut, ux)
            }
            ProblemKind::Burgers => {
                let ut = g.d(u, "t", 1)?;
                let ux = g.d(u, "x", 1)?;
                let uxx = g.d(u, "x", 2)?;
                let adv = g.mul(u, ux);
                let diff = g.scale(burgers_nu(), uxx);
                let s = g.add(ut, adv);
                g.sub(s, diff)
            }
            ProblemKind::ConvectionDiffusion => {
                let ut = g.d(u, "t", 1)?;
                let ux = g.d(u, "x", 1)?;
                let uxx = g.d(u, "x", 2)?;
                let adv = g.scale(CD_C, ux);
                let diff = g.scale(CD_MU, uxx);
                let s = g.add(ut, adv);
                g.sub(s, diff)
            }
            ProblemKind::Poisson => {
                // -u'' - (4x^2 sin(x^2) - 2cos(x^2))
                let x = inputs[0];
                let uxx = g.d(u, "x", 2)?;
                let x2 = g.powi(x, 2);
                let s = g.sin(x2);
                let c = g.cos(x2);
                let x2s = g.mul(x2, s);
                let a = g.scale(4.0, x2s);
                let b = g.scale(2.0, c);
                let f = g.sub(a, b);
                let nu = g.neg(uxx);
                g.sub(nu, f)
            }
            ProblemKind::Wave => {
                let utt = g.d(u, "t", 2)?;
                let uxx = g.d(u, "x", 2)?;
                let w = g.scale(WAVE_C2, uxx);
                g.sub(utt, w)
            }
        })
    }

    /// Condition residual with the target supplied as an expression (a
    /// constant, or a per-point input column).
    pub fn condition_expr(&self, g: &mut Graph, spec: &ConditionSpec, heads: &HeadOutputs, target: ExprNode) -> Result<ExprNode, PdeError> {
        let lhs = match spec.kind {
            ConditionKind::Boundary | ConditionKind::Initial => heads.mu(),
            ConditionKind::InitialDerivative => g.d(heads.mu(), "t", 1)?,
        };
        Ok(g.sub(lhs, target))
    }

    /// `B[u] - g` (or `u_t - h` for a velocity condition) at one point on
    /// the spec's locus. The result is an expression over the input leaves,
    /// to be evaluated with the point bound.
    pub fn condition_residual(
        &self,
        g: &mut Graph,
        spec: &ConditionSpec,
        heads: &HeadOutputs,
        point: (f64, f64),
    ) -> Result<ExprNode, PdeError> {
        let (t, x) = point;
        if !spec.contains(t, x, self.t_max) {
            return Err(PdeError::OffLocus { t, x });
        }
        let target = g.constant(spec.target(t, x));
        self.condition_expr(g, spec, heads, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Bindings;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bind(p: &PdeProblem, t: f64, x: f64) -> Bindings<'static> {
        let b = Bindings::new(&[]).with("x", x);
        if p.dims() == 2 {
            b.with("t", t)
        } else {
            b
        }
    }

    fn leaves(p: &PdeProblem, g: &mut Graph) -> Vec<ExprNode> {
        p.input_names().iter().map(|n| g.input(n)).collect()
    }

    #[test]
    fn catalog_has_five_problems_with_published_constants() {
        let c = catalog();
        assert_eq!(c.len(), 5);
        let adv = problem(ProblemKind::Advection);
        assert_eq!((adv.x_lo, adv.x_hi, adv.t_max), (0.0, 1.0, Some(0.5)));
        let cd = problem(ProblemKind::ConvectionDiffusion);
        assert_eq!((cd.x_lo, cd.x_hi, cd.t_max), (-4.0, 4.0, Some(1.0)));
        assert_eq!((CD_C, CD_MU), (4.0, 0.05));
        let w = problem(ProblemKind::Wave);
        assert_eq!((w.x_hi, w.t_max), (4.0, Some(2.0)));
        assert_eq!(WAVE_C2, 3.0);
        assert_eq!("convection_diffusion".parse::<ProblemKind>().unwrap(), ProblemKind::ConvectionDiffusion);
        assert!("heat".parse::<ProblemKind>().is_err());
    }

    #[test]
    fn exact_examples() {
        let adv = problem(ProblemKind::Advection);
        assert!(adv.exact(0.25, 0.25).unwrap().abs() < 1e-15);
        let cd = problem(ProblemKind::ConvectionDiffusion);
        assert!((cd.exact(0.0, -2.0).unwrap() - 1.4142136).abs() < 1e-7);
        let w = problem(ProblemKind::Wave);
        let want = 1.0 - 1.0 / 16f64.cosh();
        assert!((w.exact(0.0, 0.0).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.99999977).abs() < 1e-8);
        let b = problem(ProblemKind::Burgers);
        assert_eq!(b.exact(0.1, 0.2), Err(PdeError::OracleOnly { problem: ProblemKind::Burgers }));
    }

    #[test]
    fn residual_examples() {
        let adv = problem(ProblemKind::Advection);
        let mut g = Graph::new();
        let inputs = leaves(&adv, &mut g);
        let c = g.constant(1.7);
        let one = g.constant(1.0);
        let r = adv.residual(&mut g, &HeadOutputs::pinned(c, one), &inputs).unwrap();
        assert_eq!(g.eval(r, &bind(&adv, 0.2, 0.3)).unwrap(), 0.0);

        let burgers = problem(ProblemKind::Burgers);
        let mut g = Graph::new();
        let inputs = leaves(&burgers, &mut g);
        let one = g.constant(1.0);
        let r = burgers.residual(&mut g, &HeadOutputs::pinned(inputs[1], one), &inputs).unwrap();
        assert_eq!(g.eval(r, &bind(&burgers, 0.4, -0.35)).unwrap(), -0.35);

        let wrong = burgers.residual(&mut g, &HeadOutputs::pinned(one, one), &inputs[..1]);
        assert!(matches!(wrong, Err(PdeError::Dimension { expected: 2, got: 1, .. })));
    }

    #[test]
    fn condition_examples() {
        let adv = problem(ProblemKind::Advection);
        let right = adv.conditions[1];
        assert_eq!(right.target(0.5, 1.0), 2.0);
        let mut g = Graph::new();
        let inputs = leaves(&adv, &mut g);
        let zero = g.constant(0.0);
        let one = g.constant(1.0);
        let heads = HeadOutputs::pinned(zero, one);
        let r = adv.condition_residual(&mut g, &right, &heads, (0.5, 1.0)).unwrap();
        assert_eq!(g.eval(r, &bind(&adv, 0.5, 1.0)).unwrap(), -2.0);
        assert!(matches!(adv.condition_residual(&mut g, &right, &heads, (0.5, 0.9)), Err(PdeError::OffLocus { .. })));
        let _ = inputs;

        let p = problem(ProblemKind::Poisson);
        let hi = p.conditions[1];
        assert_eq!(hi.target(0.0, 2.0 * PI.sqrt()), 0.0);
        assert!(hi.contains(0.0, 2.0 * PI.sqrt(), None));

        let w = problem(ProblemKind::Wave);
        let vel = w.conditions.iter().find(|c| c.kind == ConditionKind::InitialDerivative).unwrap();
        assert_eq!(vel.target(0.0, 1.3), 0.0);
        let mut g = Graph::new();
        let inputs = leaves(&w, &mut g);
        let tx = g.mul(inputs[0], inputs[1]);
        let one = g.constant(1.0);
        let r = w.condition_residual(&mut g, vel, &HeadOutputs::pinned(tx, one), (0.0, 1.3)).unwrap();
        // d/dt (t x) = x
        assert_eq!(g.eval(r, &bind(&w, 0.0, 1.3)).unwrap(), 1.3);
    }

    #[test]
    fn exact_expressions_agree_with_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in catalog().into_iter().filter(|p| p.has_exact()) {
            let mut g = Graph::new();
            let inputs = leaves(&p, &mut g);
            let e = p.exact_expr(&mut g, &inputs).unwrap();
            for _ in 0..50 {
                let t = rng.gen_range(0.0..=p.t_max.unwrap_or(0.0));
                let x = rng.gen_range(p.x_lo..=p.x_hi);
                let a = g.eval(e, &bind(&p, t, x)).unwrap();
                let b = p.exact(t, x).unwrap();
                assert!((a - b).abs() <= 1e-13 * b.abs().max(1.0), "{}: {a} vs {b}", p.name());
            }
        }
    }

    #[test]
    fn wave_exact_at_zero_matches_initial_condition() {
        let w = problem(ProblemKind::Wave);
        let ic = w.conditions.iter().find(|c| c.kind == ConditionKind::Initial).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let x = rng.gen_range(-4.0..=4.0);
            assert!((w.exact(0.0, x).unwrap() - ic.target(0.0, x)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_diff_exact_at_zero_matches_initial_condition() {
        let p = problem(ProblemKind::ConvectionDiffusion);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-4.0..=4.0);
            let ic = 0.1 / (0.1f64 * 0.05).sqrt() * (-(x + 2.0).powi(2) / (4.0 * 0.1 * 0.05)).exp();
            assert!((p.exact(0.0, x).unwrap() - ic).abs() < 1e-12);
        }
    }

    #[test]
    fn advection_exact_matches_boundary_targets() {
        let p = problem(ProblemKind::Advection);
        for k in 0..=50 {
            let t = 0.5 * k as f64 / 50.0;
            assert!((p.exact(t, 0.0).unwrap() - p.conditions[0].target(t, 0.0)).abs() < 1e-12);
            assert!((p.exact(t, 1.0).unwrap() - p.conditions[1].target(t, 1.0)).abs() < 1e-12);
        }
    }
}
