use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vipinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vipinn")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

const TINY: &str = r#"
iterations = 30
seeds = [0, 1]
metric_interval = 10
test_points = 200
[counts]
collocation = 20
boundary = 6
initial = 6
[net]
hidden_layers = 2
neurons = 6
"#;

fn tiny(problem: &str, method_line: &str) -> String {
    format!("problem = \"{problem}\"\n{method_line}\n{TINY}")
}

fn run_in(dir: &TempDir, cmd: &str, config: &Path, out: &str) -> Output {
    let out = dir.path().join(out);
    let cache = dir.path().join("cache");
    vipinn(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--cache-dir", cache.to_str().unwrap(), "--jobs", "2"])
}

fn read(dir: &TempDir, out: &str, file: &str) -> String {
    std::fs::read_to_string(dir.path().join(out).join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn run_writes_curves_fields_and_six_statistics() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "adv.toml", &tiny("advection", "method = \"m5\""));
    let o = run_in(&dir, "run", &cfg, "a");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let agg = read(&dir, "a", "advection_m5_aggregate.csv");
    let rows: Vec<&str> = agg.lines().collect();
    assert_eq!(rows[0], "statistic,M5");
    let labels: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["Mean MSE", "Mean L2-error", "Min MSE", "Min L2-error", "Max MSE", "Max L2-error"]);

    let curve = read(&dir, "a", "advection_m5_seed1_curve.csv");
    assert!(curve.starts_with("iteration,L_r,L_b,L_0,Lp_r,Lp_b,Lp_0,mse,l2,wall_ms\n"));
    let iters: Vec<&str> = curve.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(iters, ["0", "10", "20", "30"]);
    let field = read(&dir, "a", "advection_m5_seed0_field.csv");
    assert!(field.starts_with("t,x,abs_error,sigma2\n"));
    assert_eq!(field.lines().count(), 1 + 10 * 20);
    assert!(read(&dir, "a", "advection_m5_runs.csv").contains("m5,1,completed,30,"));

    // identical bytes on a second invocation, whatever the thread count
    let again = run_in(&dir, "run", &cfg, "b");
    assert_eq!(again.status.code(), Some(0));
    for f in ["advection_m5_aggregate.csv", "advection_m5_seed0_curve.csv", "advection_m5_seed1_field.csv"] {
        assert_eq!(read(&dir, "a", f), read(&dir, "b", f), "{f}");
    }
}

#[test]
fn single_seed_override_gives_degenerate_statistics() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "p.toml", &tiny("poisson", "method = \"m1\"").replace("initial = 6", "initial = 0"));
    let out = dir.path().join("o");
    let o = vipinn(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed-override", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = read(&dir, "o", "poisson_m1_aggregate.csv");
    let vals: Vec<&str> = agg.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(vals[0], vals[2]);
    assert_eq!(vals[0], vals[4]);
    assert_eq!(vals[1], vals[3]);
    assert!(dir.path().join("o/poisson_m1_seed7_curve.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let lam = write(dir.path(), "l.toml", &format!("{}\n[method_params]\nlambda = 1.0", tiny("advection", "method = \"m1\"")));
    assert_eq!(run_in(&dir, "run", &lam, "x").status.code(), Some(2));
    let unknown = write(dir.path(), "u.toml", &format!("{}\nlearning_rate = 3", tiny("advection", "method = \"m1\"")));
    assert_eq!(run_in(&dir, "run", &unknown, "x").status.code(), Some(2));
    let dup = write(dir.path(), "d.toml", &tiny("advection", "methods = [\"m1\", \"m1\"]"));
    assert_eq!(run_in(&dir, "compare", &dup, "x").status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(run_in(&dir, "run", &missing, "x").status.code(), Some(2));
    let empty_axis = write(dir.path(), "g.toml", "[base]\nproblem = \"advection\"\nmethod = \"m5\"\n[grid]\nkind = \"lambda\"\nvalues = []");
    assert_eq!(run_in(&dir, "grid", &empty_axis, "x").status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn divergence_exits_with_three_and_flags_runs() {
    let dir = TempDir::new().unwrap();
    let body = format!("{}\n[optimizer]\nlr = 1e300", tiny("advection", "method = \"m1\""));
    let cfg = write(dir.path(), "div.toml", &body);
    let o = run_in(&dir, "run", &cfg, "d");
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = read(&dir, "d", "advection_m1_runs.csv");
    assert!(runs.lines().skip(1).all(|l| l.contains(",diverged,")), "{runs}");
    assert!(dir.path().join("d/advection_m1_seed0_curve.csv").exists());
}

#[test]
fn compare_has_a_column_per_method() {
    let dir = TempDir::new().unwrap();
    let all = write(dir.path(), "c.toml", &tiny("advection", "methods = [\"m1\", \"m2\", \"m3\", \"m4\", \"m5\"]"));
    let o = run_in(&dir, "compare", &all, "c");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = read(&dir, "c", "advection_compare_aggregate.csv");
    assert_eq!(agg.lines().next().unwrap(), "statistic,M1,M2,M3,M4,M5");
    assert_eq!(agg.lines().count(), 7);
    assert!(agg.lines().all(|l| l.split(',').count() == 6));

    let poisson = tiny("poisson", "methods = [\"m1\", \"m2\", \"m3\", \"m5\"]").replace("initial = 6", "initial = 0");
    let p = write(dir.path(), "p.toml", &poisson);
    assert_eq!(run_in(&dir, "compare", &p, "p").status.code(), Some(0));
    assert_eq!(read(&dir, "p", "poisson_compare_aggregate.csv").lines().next().unwrap(), "statistic,M1,M2,M3,M5");
    let with_m4 = write(dir.path(), "p4.toml", &poisson.replace("\"m5\"]", "\"m4\", \"m5\"]"));
    assert_eq!(run_in(&dir, "compare", &with_m4, "p4").status.code(), Some(2));

    let single = write(dir.path(), "s.toml", &tiny("advection", "methods = [\"m1\"]"));
    assert_eq!(run_in(&dir, "compare", &single, "s").status.code(), Some(2));
}

#[test]
fn grid_writes_one_cell_per_axis_value() {
    let dir = TempDir::new().unwrap();
    let base = tiny("advection", "method = \"m5\"").replace("seeds = [0, 1]", "seeds = [0]");
    let spec = format!(
        "[base]\n{}\n[grid]\nkind = \"lambda\"\nvalues = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0]",
        base.replace("[counts]", "[base.counts]").replace("[net]", "[base.net]")
    );
    let g = write(dir.path(), "g.toml", &spec);
    let o = run_in(&dir, "grid", &g, "g");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir, "g", "advection_grid_lambda.csv");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,1e-2,5e-2,1e-1,5e-1,1e0,5e0,1e1");
    assert_eq!(lines[1].split(',').count(), 8);
    assert!(lines[1].split(',').skip(1).all(|v| v.parse::<f64>().is_ok()));
}

#[test]
fn check_regenerates_a_corrupted_cache() {
    let dir = TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    std::fs::create_dir_all(&cache).unwrap();
    std::fs::write(cache.join("burgers_reference.bin"), b"not a reference").unwrap();
    let o = vipinn(&["check", "--cache-dir", cache.to_str().unwrap()]);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("cache regenerated"), "{stdout}");
    let burgers = stdout.lines().find(|l| l.contains("burgers reference")).unwrap();
    assert!(burgers.starts_with("PASS"), "{burgers}");
    assert!(stdout.lines().filter(|l| l.contains("gradient ")).all(|l| l.starts_with("PASS")), "{stdout}");
    let again = vipinn(&["check", "--cache-dir", cache.to_str().unwrap()]);
    assert!(String::from_utf8(again.stdout).unwrap().contains("cache loaded"));
}

#[test]
fn check_fails_at_a_tolerance_below_the_difference_floor() {
    let dir = TempDir::new().unwrap();
    let o = vipinn(&["check", "--fd-tol", "1e-7", "--cache-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("FAIL gradient")), "{stdout}");
}
