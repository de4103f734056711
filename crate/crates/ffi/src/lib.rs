//! C ABI over the vipinn training library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_train`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`VipinnStatus`]; on failure a message is kept per thread and
//! can be read with [`vipinn_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vipinn::bench::config::ExperimentFile;
use vipinn::bench::{prepare_grid, DEFAULT_CACHE_DIR};
use vipinn::losses::WeightStrategy;
use vipinn::pde::{Counts, ProblemKind};
use vipinn::sampler::TestGrid;
use vipinn::trainer::{metrics, train, MetricError, RunReport, RunStatus, TrainConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VipinnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    /// The run stopped on a non-finite loss or gradient.
    Diverged = 4,
    /// The L2-error is undefined because the reference is zero.
    UndefinedL2 = 5,
    OutOfRange = 6,
    Io = 7,
    /// A panic was caught; the handle involved should be freed.
    Internal = 8,
}

/// Opaque training configuration.
pub struct VipinnConfig {
    inner: TrainConfig,
}

/// Opaque result of one training run.
pub struct VipinnRun {
    report: RunReport,
    grid: TestGrid,
}

/// One recorded checkpoint.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VipinnCheckpoint {
    pub iteration: u64,
    /// `L_r`, `L_b`, `L_0`
    pub terms: [f64; 3],
    /// `L'_r`, `L'_b`, `L'_0`
    pub aux_terms: [f64; 3],
    pub mse: f64,
    pub l2: f64,
    pub wall_ms: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn fail(status: VipinnStatus, msg: impl Into<String>) -> VipinnStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into [`VipinnStatus::Internal`] and clearing
/// the error message on success.
fn guard(f: impl FnOnce() -> VipinnStatus) -> VipinnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(VipinnStatus::Ok) => {
            set_error("");
            VipinnStatus::Ok
        }
        Ok(s) => s,
        Err(_) => fail(VipinnStatus::Internal, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, VipinnStatus> {
    if p.is_null() {
        return Err(fail(VipinnStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(VipinnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

macro_rules! deref {
    ($p:expr, $what:expr) => {
        match $p.as_ref() {
            Some(v) => v,
            None => return fail(VipinnStatus::NullPointer, concat!($what, " is null")),
        }
    };
    (mut $p:expr, $what:expr) => {
        match $p.as_mut() {
            Some(v) => v,
            None => return fail(VipinnStatus::NullPointer, concat!($what, " is null")),
        }
    };
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vipinn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vipinn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a config with a benchmark's published settings.
///
/// `problem` is one of `advection`, `burgers`, `convection_diffusion`,
/// `poisson`, `wave`; `method` is `m1` to `m5` with default parameters.
///
/// # Safety
/// `problem` and `method` must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_new(
    problem: *const c_char,
    method: *const c_char,
    out: *mut *mut VipinnConfig,
) -> VipinnStatus {
    guard(|| {
        let out = deref!(mut out, "out");
        let p = try_status!(str_arg(problem, "problem"));
        let m = try_status!(str_arg(method, "method"));
        let kind: ProblemKind = match p.parse() {
            Ok(k) => k,
            Err(e) => return fail(VipinnStatus::InvalidArgument, e.to_string()),
        };
        let Some(strategy) = WeightStrategy::from_label(m) else {
            return fail(VipinnStatus::InvalidArgument, format!("unknown method '{m}'"));
        };
        *out = Box::into_raw(Box::new(VipinnConfig { inner: TrainConfig::published(kind, strategy) }));
        VipinnStatus::Ok
    })
}

/// Parses a single-method experiment file given as TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_from_toml(toml: *const c_char, out: *mut *mut VipinnConfig) -> VipinnStatus {
    guard(|| {
        let out = deref!(mut out, "out");
        let text = try_status!(str_arg(toml, "toml"));
        let exp = match ExperimentFile::parse(text).and_then(|f| f.resolve()) {
            Ok(e) => e,
            Err(e) => return fail(VipinnStatus::Config, e.to_string()),
        };
        if exp.configs.len() != 1 {
            return fail(VipinnStatus::Config, "the file must name a single method");
        }
        let inner = exp.configs.into_iter().next().expect("one config");
        *out = Box::into_raw(Box::new(VipinnConfig { inner }));
        VipinnStatus::Ok
    })
}

/// Releases a config. Null is ignored.
///
/// # Safety
/// `config` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_free(config: *mut VipinnConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Applies `f` and re-validates, restoring the previous value on failure.
unsafe fn update(config: *mut VipinnConfig, f: impl FnOnce(&mut TrainConfig)) -> VipinnStatus {
    guard(|| {
        let c = deref!(mut config, "config");
        let before = c.inner.clone();
        f(&mut c.inner);
        if let Err(e) = c.inner.validate() {
            c.inner = before;
            return fail(VipinnStatus::Config, e.to_string());
        }
        VipinnStatus::Ok
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_set_iterations(config: *mut VipinnConfig, iterations: u64) -> VipinnStatus {
    update(config, |c| c.iterations = iterations as usize)
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_set_counts(
    config: *mut VipinnConfig,
    collocation: u64,
    boundary: u64,
    initial: u64,
    extra: u64,
) -> VipinnStatus {
    update(config, |c| {
        c.counts = Counts {
            collocation: collocation as usize,
            boundary: boundary as usize,
            initial: initial as usize,
            extra: extra as usize,
        }
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_set_network(
    config: *mut VipinnConfig,
    hidden_layers: u64,
    neurons: u64,
) -> VipinnStatus {
    update(config, |c| {
        c.hidden_layers = hidden_layers as usize;
        c.neurons = neurons as usize;
    })
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_set_metric_interval(config: *mut VipinnConfig, interval: u64) -> VipinnStatus {
    update(config, |c| c.metric_interval = interval as usize)
}

/// Evaluation grid size (ignored for Burgers).
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_set_test_points(config: *mut VipinnConfig, points: u64) -> VipinnStatus {
    update(config, |c| c.test_points = points as usize)
}

/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_config_set_learning_rate(config: *mut VipinnConfig, lr: f64) -> VipinnStatus {
    update(config, |c| c.adam.lr = lr)
}

/// Trains one network with initialisation seed `seed`. `cache_dir` (may be
/// null) is where the Burgers reference is cached. A run that diverges
/// still produces a handle; query it with [`vipinn_run_final_metrics`].
///
/// # Safety
/// `config` must be a live handle, `cache_dir` null or a NUL-terminated
/// string, and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vipinn_train(
    config: *const VipinnConfig,
    seed: u64,
    cache_dir: *const c_char,
    out: *mut *mut VipinnRun,
) -> VipinnStatus {
    guard(|| {
        let c = deref!(config, "config");
        let out = deref!(mut out, "out");
        let dir = if cache_dir.is_null() {
            PathBuf::from(DEFAULT_CACHE_DIR)
        } else {
            PathBuf::from(try_status!(str_arg(cache_dir, "cache_dir")))
        };
        let grid = match prepare_grid(&c.inner, &dir) {
            Ok(g) => g,
            Err(e) => return fail(VipinnStatus::Io, e.to_string()),
        };
        let report = match train(&c.inner, seed, &grid) {
            Ok(r) => r,
            Err(e) => return fail(VipinnStatus::Config, e.to_string()),
        };
        *out = Box::into_raw(Box::new(VipinnRun { report, grid }));
        VipinnStatus::Ok
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must come from [`vipinn_train`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vipinn_run_free(run: *mut VipinnRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Final MSE and L2-error. Returns [`VipinnStatus::Diverged`] (and writes
/// the iteration to `diverged_at` when non-null) if the run failed.
///
/// # Safety
/// `run` must be a live handle; `mse` and `l2` writable; `diverged_at`
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn vipinn_run_final_metrics(
    run: *const VipinnRun,
    mse: *mut f64,
    l2: *mut f64,
    diverged_at: *mut u64,
) -> VipinnStatus {
    guard(|| {
        let r = deref!(run, "run");
        let mse = deref!(mut mse, "mse");
        let l2 = deref!(mut l2, "l2");
        match (&r.report.status, r.report.final_metrics()) {
            (RunStatus::Completed, Some((m, l))) => {
                *mse = m;
                *l2 = l;
                VipinnStatus::Ok
            }
            (RunStatus::Diverged { iteration, message }, _) => {
                if let Some(d) = diverged_at.as_mut() {
                    *d = *iteration as u64;
                }
                fail(VipinnStatus::Diverged, format!("diverged at iteration {iteration}: {message}"))
            }
            _ => fail(VipinnStatus::Internal, "run has no checkpoints"),
        }
    })
}

/// Number of recorded checkpoints, 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_run_checkpoint_count(run: *const VipinnRun) -> usize {
    run.as_ref().map_or(0, |r| r.report.checkpoints.len())
}

/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vipinn_run_checkpoint(
    run: *const VipinnRun,
    index: usize,
    out: *mut VipinnCheckpoint,
) -> VipinnStatus {
    guard(|| {
        let r = deref!(run, "run");
        let out = deref!(mut out, "out");
        let Some(c) = r.report.checkpoints.get(index) else {
            return fail(VipinnStatus::OutOfRange, format!("checkpoint {index} of {}", r.report.checkpoints.len()));
        };
        *out = VipinnCheckpoint {
            iteration: c.iteration as u64,
            terms: c.terms,
            aux_terms: c.aux_terms,
            mse: c.mse,
            l2: c.l2,
            wall_ms: c.wall_ms,
        };
        VipinnStatus::Ok
    })
}

/// Number of test grid points, 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vipinn_run_grid_len(run: *const VipinnRun) -> usize {
    run.as_ref().map_or(0, |r| r.grid.len())
}

/// Copies the test grid (`t`, `x`, reference) and the final mean and
/// variance predictions, each `len` values in grid order. Any output
/// pointer may be null to skip it. Fails if `len` differs from
/// [`vipinn_run_grid_len`] or the run diverged before producing
/// predictions.
///
/// # Safety
/// `run` must be a live handle and every non-null pointer must have room
/// for `len` values.
#[no_mangle]
pub unsafe extern "C" fn vipinn_run_field(
    run: *const VipinnRun,
    len: usize,
    t: *mut f64,
    x: *mut f64,
    reference: *mut f64,
    mean: *mut f64,
    variance: *mut f64,
) -> VipinnStatus {
    guard(|| {
        let r = deref!(run, "run");
        if len != r.grid.len() {
            return fail(VipinnStatus::OutOfRange, format!("grid has {} points, buffer {len}", r.grid.len()));
        }
        if r.report.prediction.len() != len {
            return fail(VipinnStatus::Diverged, "no predictions for a run that diverged early");
        }
        let (ts, xs): (Vec<f64>, Vec<f64>) = r.grid.points().unzip();
        for (dst, src) in [(t, &ts), (x, &xs), (reference, &r.grid.reference), (mean, &r.report.prediction), (variance, &r.report.variance)] {
            if !dst.is_null() {
                ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
            }
        }
        VipinnStatus::Ok
    })
}

/// MSE and relative L2-error of `len` predictions. With a zero reference
/// the MSE is still written and [`VipinnStatus::UndefinedL2`] returned.
///
/// # Safety
/// `predictions` and `references` must hold `len` values; `mse` and `l2`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn vipinn_metrics(
    predictions: *const f64,
    references: *const f64,
    len: usize,
    mse: *mut f64,
    l2: *mut f64,
) -> VipinnStatus {
    guard(|| {
        if predictions.is_null() || references.is_null() {
            return fail(VipinnStatus::NullPointer, "input array is null");
        }
        let mse = deref!(mut mse, "mse");
        let l2 = deref!(mut l2, "l2");
        let p = std::slice::from_raw_parts(predictions, len);
        let r = std::slice::from_raw_parts(references, len);
        match metrics(p, r) {
            Ok((m, l)) => {
                *mse = m;
                *l2 = l;
                VipinnStatus::Ok
            }
            Err(MetricError::UndefinedL2 { mse: m }) => {
                *mse = m;
                fail(VipinnStatus::UndefinedL2, "L2-error undefined for a zero reference")
            }
            Err(e) => fail(VipinnStatus::InvalidArgument, e.to_string()),
        }
    })
}
