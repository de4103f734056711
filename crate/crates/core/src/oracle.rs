//! Independent checks: central-difference gradient checking, a reference
//! Adam recurrence, and the Cole-Hopf solution of the viscous Burgers
//! benchmark evaluated by Gauss-Hermite quadrature.

use std::f64::consts::PI;
use std::fmt::Display;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::{Bindings, DiffError, Graph};
use crate::losses::{LossError, LossGraph, Objective, WeightStrategy, TARGET_INPUT};
use crate::mlp::{Architecture, HeadOutputs, NetParams};
use crate::pde::{ConditionKind, Counts, PdeError, PdeProblem};
use crate::sampler::{linspace, sample_training};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("finite-difference step must be positive, got {0}")]
    Step(f64),
    #[error("non-finite evaluation at parameter {index}: {message}")]
    Evaluation { index: usize, message: String },
    #[error("quadrature did not converge: orders {low} and {high} differ by {diff:e}")]
    Quadrature { low: usize, high: usize, diff: f64 },
    #[error("reference cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// --- finite differences -----------------------------------------------------

/// Per-parameter comparison of an analytic gradient against central
/// differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// `|a - f| / max(|a|, |f|, 1e-12)`
pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-12)
}

/// Compares `analytic[i]` with `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for each
/// index in `indices`.
pub fn fd_check<F, E>(
    mut f: F,
    analytic: &[f64],
    params: &[f64],
    indices: &[usize],
    h: f64,
    tol: f64,
) -> Result<FdReport, OracleError>
where
    F: FnMut(&[f64]) -> Result<f64, E>,
    E: Display,
{
    if !(h > 0.0) {
        return Err(OracleError::Step(h));
    }
    let mut theta = params.to_vec();
    let mut numeric = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut eval = |v: f64, theta: &mut Vec<f64>| -> Result<f64, OracleError> {
            theta[i] = v;
            let r = f(theta).map_err(|e| OracleError::Evaluation { index: i, message: e.to_string() })?;
            if !r.is_finite() {
                return Err(OracleError::Evaluation { index: i, message: format!("value {r}") });
            }
            Ok(r)
        };
        let up = eval(params[i] + h, &mut theta)?;
        let dn = eval(params[i] - h, &mut theta)?;
        theta[i] = params[i];
        numeric.push((up - dn) / (2.0 * h));
    }
    let picked: Vec<f64> = indices.iter().map(|&i| analytic[i]).collect();
    let rel_error: Vec<f64> = picked.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
    let max_rel_error = rel_error.iter().copied().fold(0.0, f64::max);
    Ok(FdReport {
        indices: indices.to_vec(),
        analytic: picked,
        numeric,
        rel_error,
        max_rel_error,
        tolerance: tol,
        pass: max_rel_error <= tol,
    })
}

/// Loss whose gradient [`fd_check_loss`] verifies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossVariant {
    Strategy(WeightStrategy),
    Nll,
}

impl Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossVariant::Strategy(s) => write!(f, "{s}"),
            LossVariant::Nll => f.write_str("nll"),
        }
    }
}

/// Indices of `per_layer` randomly chosen parameters from every layer (all
/// of a layer's parameters when it has fewer).
pub fn sample_param_indices(arch: &Architecture, per_layer: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut offset = 0;
    for (fan_in, fan_out) in arch.layer_shapes() {
        let n = fan_in * fan_out + fan_out;
        let mut picked: Vec<usize> = sample(&mut rng, n, per_layer.min(n)).into_iter().map(|k| offset + k).collect();
        picked.sort_unstable();
        out.extend(picked);
        offset += n;
    }
    out
}

/// Gradient check of one loss variant on a freshly initialised network and a
/// small sampled point set. Adaptive weights are evaluated once at the
/// initial parameters and then held fixed, as they are during training.
pub fn fd_check_loss(
    problem: &PdeProblem,
    variant: LossVariant,
    arch: &Architecture,
    counts: &Counts,
    seed: u64,
    per_layer: usize,
    h: f64,
    tol: f64,
) -> Result<FdReport, OracleError> {
    let points = sample_training(problem, counts, seed);
    let params = NetParams::init_xavier(arch, seed).map_err(LossError::from)?.to_flat();
    let indices = sample_param_indices(arch, per_layer, seed ^ 0x5eed);
    let lg = LossGraph::build(problem, arch, &points)?;
    match variant {
        LossVariant::Nll => {
            let nll = lg.nll();
            let ev = lg.evaluator(&[nll])?;
            let grad = ev.gradient(&crate::diffcore::Bindings::new(&params), &[1.0]).map_err(LossError::from)?.grad;
            fd_check(
                |p: &[f64]| ev.values(&crate::diffcore::Bindings::new(p)).map(|v| v[0]),
                &grad,
                &params,
                &indices,
                h,
                tol,
            )
        }
        LossVariant::Strategy(s) => {
            let mut obj = Objective::new(lg, s)?;
            let (bd, grad) = obj.step(&params)?;
            let w = bd.weights;
            fd_check(|p: &[f64]| obj.value_with_weights(p, w), &grad, &params, &indices, h, tol)
        }
    }
}

// --- manufactured solutions --------------------------------------------------

/// Largest residuals of a closed-form solution substituted for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ManufacturedReport {
    pub max_pde: f64,
    /// Largest boundary or initial condition residual.
    pub max_condition: f64,
    /// Where `max_condition` occurs: condition kind and `(t, x)`.
    pub worst_condition: Option<(ConditionKind, f64, f64)>,
}

/// Evaluates the PDE residual of the exact solution at `n` random interior
/// points and its condition residuals at `n` random points of each condition
/// set. Fails for problems without a closed form.
pub fn manufactured_residuals(problem: &PdeProblem, n: usize, seed: u64) -> Result<ManufacturedReport, OracleError> {
    let mut g = Graph::new();
    let names = problem.input_names();
    let inputs: Vec<_> = names.iter().map(|n| g.input(n)).collect();
    let u = problem.exact_expr(&mut g, &inputs)?;
    let one = g.constant(1.0);
    let heads = HeadOutputs::pinned(u, one);
    let pde = problem.residual(&mut g, &heads, &inputs)?;
    let target = g.input(TARGET_INPUT);
    let mut cond = Vec::new();
    for spec in &problem.conditions {
        // every locus of one kind shares the expression `B[u] - target`
        if cond.iter().all(|(k, _)| *k != spec.kind) {
            cond.push((spec.kind, problem.condition_expr(&mut g, spec, &heads, target)?));
        }
    }
    let bind = |t: f64, x: f64, target: f64| {
        let b = Bindings::new(&[]).with("x", x).with(TARGET_INPUT, target);
        if names.len() == 2 {
            b.with("t", t)
        } else {
            b
        }
    };
    let counts = Counts { collocation: n, boundary: n, initial: n, extra: n };
    let points = sample_training(problem, &counts, seed);
    let mut max_pde: f64 = 0.0;
    for &(t, x) in &points.collocation {
        max_pde = max_pde.max(g.eval(pde, &bind(t, x, 0.0))?.abs());
    }
    let mut report = ManufacturedReport { max_pde, max_condition: 0.0, worst_condition: None };
    for (kind, node) in cond {
        let set = match kind {
            ConditionKind::Boundary => &points.boundary,
            ConditionKind::Initial => &points.initial,
            ConditionKind::InitialDerivative => &points.extra,
        };
        for p in set {
            let r = g.eval(node, &bind(p.t, p.x, p.target))?.abs();
            if r > report.max_condition || report.worst_condition.is_none() {
                report.max_condition = report.max_condition.max(r);
                report.worst_condition = Some((kind, p.t, p.x));
            }
        }
    }
    Ok(report)
}

// --- Adam reference ---------------------------------------------------------

/// Parameter trajectory of Adam over a gradient sequence, written out
/// directly from the published recurrence. Element `k` holds the parameters
/// after step `k + 1`.
pub fn adam_reference(
    theta0: &[f64],
    grads: &[Vec<f64>],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut theta = theta0.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut b1t = 1.0;
    let mut b2t = 1.0;
    let mut out = Vec::with_capacity(grads.len());
    for g in grads {
        b1t *= beta1;
        b2t *= beta2;
        for j in 0..theta.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1t);
            let vh = v[j] / (1.0 - b2t);
            theta[j] -= lr * mh / (vh.sqrt() + eps);
        }
        out.push(theta.clone());
    }
    out
}

// --- Gauss-Hermite ----------------------------------------------------------

/// Nodes and weights of the `n`-point Gauss-Hermite rule for the weight
/// `exp(-z^2)`, nodes in decreasing order.
///
/// Newton iteration on the orthonormal Hermite recurrence with the roots
/// already found divided out (Maehly's correction), each search starting
/// between the previous root and the next one. Starting above the largest
/// remaining root makes the iteration converge monotonically to it, so no
/// root is skipped.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0f64; n];
    let mut w = vec![0.0f64; n];
    let nf = n as f64;
    // p_n(z) and its derivative
    let eval = |z: f64| {
        let mut p1 = PIM4;
        let mut p2 = 0.0;
        for j in 1..=n {
            let p3 = p2;
            p2 = p1;
            let jf = j as f64;
            p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
        }
        (p1, (2.0 * nf).sqrt() * p2)
    };
    for i in 0..n.div_ceil(2) {
        let mut z = if i == 0 {
            // slightly above the largest root
            (2.0 * nf + 1.0).sqrt() + 1.0
        } else if i == 1 {
            x[0] - 1e-3
        } else {
            // gaps shrink towards the centre, so this stays above the next root
            x[i - 1] - 0.5 * (x[i - 2] - x[i - 1])
        };
        for _ in 0..500 {
            let (p, dp) = eval(z);
            let deflation: f64 = x[..i].iter().map(|&r| 1.0 / (z - r)).sum();
            let step = 1.0 / (dp / p - deflation);
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        let (_, dp) = eval(z);
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

// --- Burgers reference --------------------------------------------------------

/// Viscosity of the Burgers benchmark.
pub fn burgers_viscosity() -> f64 {
    0.01 / PI
}

pub const BURGERS_NX: usize = 256;
pub const BURGERS_NT: usize = 100;
/// Quadrature order used for the cached reference.
pub const BURGERS_ORDER: usize = 200;

/// Cole-Hopf solution of `u_t + u u_x = nu u_xx`, `u(0, x) = -sin(pi x)`:
///
/// `u = -Σ w_i sin(π(x - c z_i)) f_i / Σ w_i f_i`, `c = sqrt(4 nu t)`,
/// `f_i = exp(-cos(π(x - c z_i)) / (2 π nu))`, summed in log space.
pub fn cole_hopf(t: f64, x: f64, nu: f64, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    let (z, w) = rule;
    let c = (4.0 * nu * t).sqrt();
    let k = 1.0 / (2.0 * PI * nu);
    let mut logs = Vec::with_capacity(z.len());
    let mut max = f64::NEG_INFINITY;
    for (&zi, &wi) in z.iter().zip(w) {
        let y = x - c * zi;
        let l = wi.ln() - k * (PI * y).cos();
        max = max.max(l);
        logs.push((l, (PI * y).sin()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (l, s) in logs {
        let e = (l - max).exp();
        num += s * e;
        den += e;
    }
    -num / den
}

/// Burgers solution on the 256 × 100 evaluation grid: `x` equispaced on
/// `[-1, 1]`, `t = 0, 0.01, ..., 0.99`.
#[derive(Clone, Debug, PartialEq)]
pub struct BurgersReference {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    /// `u[i * x.len() + j]` at `(t[i], x[j])`.
    pub u: Vec<f64>,
    pub order: usize,
}

/// What [`BurgersReference::load_or_generate`] had to do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Loaded,
    Generated,
    /// The file existed but failed validation.
    Regenerated,
}

const CACHE_MAGIC: &[u8; 8] = b"VIPBURG1";
pub const CACHE_FILE: &str = "burgers_reference.bin";

impl BurgersReference {
    pub fn grid() -> (Vec<f64>, Vec<f64>) {
        let x = linspace(-1.0, 1.0, BURGERS_NX);
        let t = (0..BURGERS_NT).map(|i| i as f64 / 100.0).collect();
        (t, x)
    }

    pub fn compute(order: usize) -> BurgersReference {
        let (t, x) = Self::grid();
        let rule = gauss_hermite(order);
        let nu = burgers_viscosity();
        let u = t
            .par_iter()
            .flat_map_iter(|&ti| x.iter().map(|&xj| cole_hopf(ti, xj, nu, &rule)).collect::<Vec<_>>())
            .collect();
        BurgersReference { x, t, u, order }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.u[i * self.x.len() + j]
    }

    /// Largest pointwise difference to another reference on the same grid.
    pub fn max_diff(&self, other: &BurgersReference) -> f64 {
        self.u.iter().zip(&other.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Computes the order-100 and order-200 solutions and fails if they
    /// differ by more than `tol` anywhere. Returns the order-200 solution.
    pub fn compute_checked(tol: f64) -> Result<BurgersReference, OracleError> {
        let low = Self::compute(BURGERS_ORDER / 2);
        let high = Self::compute(BURGERS_ORDER);
        let diff = high.max_diff(&low);
        if !(diff < tol) {
            return Err(OracleError::Quadrature { low: low.order, high: high.order, diff });
        }
        Ok(high)
    }

    /// Layout (little endian): magic `VIPBURG1`, `u32` nx, `u32` nt, `u32`
    /// quadrature order, `nx` x values, `nt` t values, `nt * nx` u values
    /// (t-major), all `f64`, then the SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32 + 8 * (self.x.len() + self.t.len() + self.u.len()));
        b.extend_from_slice(CACHE_MAGIC);
        for n in [self.x.len(), self.t.len(), self.order] {
            b.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.x.iter().chain(&self.t).chain(&self.u) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BurgersReference, OracleError> {
        let bad = |m: &str| OracleError::Cache(m.to_string());
        if bytes.len() < 8 + 12 + 32 {
            return Err(bad("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        if &body[..8] != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |k: usize| u32::from_le_bytes(body[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize;
        let (nx, nt, order) = (u32_at(0), u32_at(1), u32_at(2));
        let floats = &body[20..];
        if floats.len() != 8 * (nx + nt + nt * nx) {
            return Err(bad("size does not match the header"));
        }
        let vals: Vec<f64> = floats.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(BurgersReference {
            x: vals[..nx].to_vec(),
            t: vals[nx..nx + nt].to_vec(),
            u: vals[nx + nt..].to_vec(),
            order,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), OracleError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // Write to a sibling temporary file first so readers never see a
        // partial cache.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BurgersReference, OracleError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Loads `dir/burgers_reference.bin`, or computes and writes it when the
    /// file is missing or fails validation.
    pub fn load_or_generate(dir: &Path) -> Result<(BurgersReference, CacheStatus), OracleError> {
        let path = Self::cache_path(dir);
        let status = match Self::load(&path) {
            Ok(r) if r.is_expected_grid() => return Ok((r, CacheStatus::Loaded)),
            Ok(_) | Err(OracleError::Cache(_)) => CacheStatus::Regenerated,
            Err(OracleError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => CacheStatus::Generated,
            Err(e) => return Err(e),
        };
        let r = Self::compute(BURGERS_ORDER);
        r.save(&path)?;
        Ok((r, status))
    }

    pub fn cache_path(dir: &Path) -> PathBuf {
        dir.join(CACHE_FILE)
    }

    fn is_expected_grid(&self) -> bool {
        let (t, x) = Self::grid();
        self.order == BURGERS_ORDER && self.t == t && self.x == x
    }
}
