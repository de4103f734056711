//! Training point sampling and evaluation grids.
//!
//! All randomness comes from a ChaCha8 generator seeded with the run's data
//! seed. Each point set draws from its own stream of that generator, so
//! changing one count never shifts the points of another set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::oracle::BurgersReference;
use crate::pde::{ConditionKind, CountKey, Counts, Locus, PdeProblem, ProblemKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("the burgers test grid needs the Cole-Hopf reference, which has not been generated")]
    OracleUnavailable,
    #[error("test grid needs at least {min} points, got {got}")]
    TooFew { min: usize, got: usize },
}

/// A condition point with its target value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CondPoint {
    pub t: f64,
    pub x: f64,
    pub target: f64,
}

/// Training points of one run. Stationary problems have `t = 0` everywhere.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    /// `(t, x)` pairs.
    pub collocation: Vec<(f64, f64)>,
    pub boundary: Vec<CondPoint>,
    pub initial: Vec<CondPoint>,
    /// Velocity initial condition points (wave only).
    pub extra: Vec<CondPoint>,
}

impl PointSet {
    pub fn is_empty(&self) -> bool {
        self.collocation.is_empty() && self.boundary.is_empty() && self.initial.is_empty() && self.extra.is_empty()
    }
}

// Stream 0 is left to network initialisation, which uses the same seed.
const STREAM_COLLOCATION: u64 = 1;
const STREAM_BOUNDARY: u64 = 2;
const STREAM_INITIAL: u64 = 3;
const STREAM_EXTRA: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uniform in `[lo, hi]`; a degenerate interval returns `lo`.
fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Samples the training points. Boundary points are split evenly over the
/// boundary edges, the lower edge taking the remainder; Poisson always gets
/// its two boundary points regardless of `counts.boundary`.
pub fn sample_training(problem: &PdeProblem, counts: &Counts, seed: u64) -> PointSet {
    let t_max = problem.t_max.unwrap_or(0.0);
    let (lo, hi) = (problem.x_lo, problem.x_hi);
    let mut set = PointSet::default();

    let mut rng = stream(seed, STREAM_COLLOCATION);
    set.collocation = (0..counts.collocation)
        .map(|_| {
            let t = if problem.t_max.is_some() { uniform(&mut rng, 0.0, t_max) } else { 0.0 };
            (t, uniform(&mut rng, lo, hi))
        })
        .collect();

    let edges: Vec<_> = problem.boundary_conditions().collect();
    let mut rng = stream(seed, STREAM_BOUNDARY);
    let n_edges = edges.len();
    for (i, spec) in edges.iter().enumerate() {
        match spec.locus {
            Locus::Point { x } => set.boundary.push(CondPoint { t: 0.0, x, target: spec.target(0.0, x) }),
            Locus::Edge { x } => {
                let share = counts.boundary / n_edges + usize::from(i < counts.boundary % n_edges);
                for _ in 0..share {
                    let t = uniform(&mut rng, 0.0, t_max);
                    set.boundary.push(CondPoint { t, x, target: spec.target(t, x) });
                }
            }
            Locus::InitialLine => unreachable!("boundary conditions live on edges or points"),
        }
    }

    for spec in &problem.conditions {
        let (n, id, out) = match (spec.kind, spec.count) {
            (ConditionKind::Initial, CountKey::Initial) => (counts.initial, STREAM_INITIAL, &mut set.initial),
            (ConditionKind::InitialDerivative, CountKey::Extra) => (counts.extra, STREAM_EXTRA, &mut set.extra),
            _ => continue,
        };
        let mut rng = stream(seed, id);
        for _ in 0..n {
            let x = uniform(&mut rng, lo, hi);
            out.push(CondPoint { t: 0.0, x, target: spec.target(0.0, x) });
        }
    }
    set
}

/// Evaluation points with reference values, ordered `t`-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TestGrid {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    /// Reference solution at `(t[i], x[j])`, index `i * x.len() + j`.
    pub reference: Vec<f64>,
}

impl TestGrid {
    pub fn len(&self) -> usize {
        self.reference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }

    /// Points as `(t, x)` pairs in storage order.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.t.iter().flat_map(move |&t| self.x.iter().map(move |&x| (t, x)))
    }
}

/// Inclusive equispaced points; the endpoints are bit-equal to the bounds.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Shape of a time-dependent test grid with about `n` points:
/// `n_t = max(2, floor(sqrt(n / 2)))`, `n_x = ceil(n / n_t)`.
pub fn grid_shape(n: usize) -> (usize, usize) {
    let nt = ((n as f64 / 2.0).sqrt().floor() as usize).max(2);
    (nt, n.div_ceil(nt))
}

/// Deterministic evaluation grid. Burgers ignores `n` and uses the reference
/// grid of 256 `x` values by 100 `t` values.
pub fn test_grid(problem: &PdeProblem, n: usize, burgers: Option<&BurgersReference>) -> Result<TestGrid, SampleError> {
    if problem.kind == ProblemKind::Burgers {
        let r = burgers.ok_or(SampleError::OracleUnavailable)?;
        return Ok(TestGrid { t: r.t.clone(), x: r.x.clone(), reference: r.u.clone() });
    }
    let exact = |t: f64, x: f64| problem.exact(t, x).expect("closed-form solution");
    match problem.t_max {
        None => {
            if n < 2 {
                return Err(SampleError::TooFew { min: 2, got: n });
            }
            let x = linspace(problem.x_lo, problem.x_hi, n);
            let reference = x.iter().map(|&x| exact(0.0, x)).collect();
            Ok(TestGrid { t: vec![0.0], x, reference })
        }
        Some(t_max) => {
            if n < 4 {
                return Err(SampleError::TooFew { min: 4, got: n });
            }
            let (nt, nx) = grid_shape(n);
            let t = linspace(0.0, t_max, nt);
            let x = linspace(problem.x_lo, problem.x_hi, nx);
            let reference = t.iter().flat_map(|&t| x.iter().map(move |&x| exact(t, x))).collect();
            Ok(TestGrid { t, x, reference })
        }
    }
}
