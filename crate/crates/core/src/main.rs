use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vipinn::bench::{
    cmd_check, cmd_compare, cmd_grid, cmd_run, BenchError, CheckOptions, Outcome, RunOptions, Written,
    DEFAULT_CACHE_DIR, FD_TOLERANCE,
};

#[derive(Parser)]
#[command(name = "vipinn", version, about = "Variance-involved PINN benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method over its seeds.
    Run(TrainArgs),
    /// Train several methods and tabulate them side by side.
    Compare(TrainArgs),
    /// Train every cell of a points, architecture or lambda grid.
    Grid(TrainArgs),
    /// Run the oracle self-checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment (or grid) file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the file's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated seeds replacing the file's list.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Where the Burgers reference is cached.
    #[arg(long, default_value = DEFAULT_CACHE_DIR)]
    cache_dir: PathBuf,
    /// Record wall-clock milliseconds in the curve files.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// Relative tolerance of the gradient checks.
    #[arg(long, default_value_t = FD_TOLERANCE)]
    fd_tol: f64,
    #[arg(long, default_value = DEFAULT_CACHE_DIR)]
    cache_dir: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
}

impl TrainArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out: self.out.clone(),
            jobs: self.jobs,
            seed_override: self.seed_override.clone(),
            cache_dir: Some(self.cache_dir.clone()),
            timing: self.timing,
        }
    }
}

fn report(result: Result<(Outcome, Written), BenchError>) -> i32 {
    match result {
        Ok((outcome, written)) => {
            for f in &written.files {
                println!("wrote {}", f.display());
            }
            if let Outcome::Diverged { runs } = outcome {
                eprintln!("{runs} run(s) diverged; see the *_runs.csv status table");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(a) => report(cmd_run(&a.config, &a.options())),
        Command::Compare(a) => report(cmd_compare(&a.config, &a.options())),
        Command::Grid(a) => report(cmd_grid(&a.config, &a.options())),
        Command::Check(a) => {
            let opts = CheckOptions { fd_tolerance: a.fd_tol, cache_dir: a.cache_dir, jobs: a.jobs };
            match cmd_check(&opts) {
                Ok((outcome, lines)) => {
                    let width = lines.iter().map(|l| l.name.len()).max().unwrap_or(0);
                    for l in &lines {
                        println!("{} {:width$}  {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
                    }
                    let failed = lines.iter().filter(|l| !l.pass).count();
                    println!("{} of {} checks passed", lines.len() - failed, lines.len());
                    outcome.exit_code()
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
