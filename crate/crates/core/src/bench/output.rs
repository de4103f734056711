//! CSV emission. Numbers use Rust's shortest round-trip scientific format,
//! which does not depend on the locale.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::sampler::TestGrid;
use crate::trainer::{AggregateReport, RunReport, RunStatus};

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub const CURVE_HEADER: &str = "iteration,L_r,L_b,L_0,Lp_r,Lp_b,Lp_0,mse,l2,wall_ms";

/// One row per checkpoint.
pub fn curve_csv(report: &RunReport) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for c in &report.checkpoints {
        let _ = write!(s, "{}", c.iteration);
        for v in c.terms.iter().chain(&c.aux_terms).chain([&c.mse, &c.l2, &c.wall_ms]) {
            let _ = write!(s, ",{}", fmt_f64(*v));
        }
        s.push('\n');
    }
    s
}

/// Absolute error of the final mean prediction and the predicted variance
/// at every test grid point.
pub fn field_csv(grid: &TestGrid, report: &RunReport) -> String {
    let mut s = String::from("t,x,abs_error,sigma2\n");
    for (((t, x), (p, r)), v) in grid.points().zip(report.prediction.iter().zip(&grid.reference)).zip(&report.variance) {
        let _ = writeln!(s, "{},{},{},{}", fmt_f64(t), fmt_f64(x), fmt_f64((p - r).abs()), fmt_f64(*v));
    }
    s
}

/// Statistics rows with one column per method; a method whose runs all
/// failed gets empty cells.
pub fn aggregate_csv(columns: &[(String, Option<AggregateReport>)]) -> String {
    let mut s = String::from("statistic");
    for (label, _) in columns {
        let _ = write!(s, ",{label}");
    }
    s.push('\n');
    for (i, row) in AggregateReport::ROW_LABELS.iter().enumerate() {
        s.push_str(row);
        for (_, agg) in columns {
            s.push(',');
            if let Some(a) = agg {
                s.push_str(&fmt_f64(a.rows()[i]));
            }
        }
        s.push('\n');
    }
    s
}

/// Status of every run, flagging divergence.
pub fn runs_csv(rows: &[(String, &RunReport)]) -> String {
    let mut s = String::from("method,seed,status,iteration,final_mse,final_l2\n");
    for (method, r) in rows {
        let (status, it) = match &r.status {
            RunStatus::Completed => ("completed", r.checkpoints.last().map_or(0, |c| c.iteration)),
            RunStatus::Diverged { iteration, .. } => ("diverged", *iteration),
        };
        let (mse, l2) = r.final_metrics().map_or((String::new(), String::new()), |(m, l)| (fmt_f64(m), fmt_f64(l)));
        let _ = writeln!(s, "{method},{},{status},{it},{mse},{l2}", r.seed);
    }
    s
}

/// Mean L2-error per cell; cells without a successful run are empty.
pub fn grid_csv(corner: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>]) -> String {
    let mut s = String::from(corner);
    for c in cols {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (label, vals) in rows.iter().zip(values) {
        s.push_str(label);
        for v in vals {
            s.push(',');
            if let Some(v) = v {
                s.push_str(&fmt_f64(*v));
            }
        }
        s.push('\n');
    }
    s
}
