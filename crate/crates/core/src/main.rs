use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use antiuav_core::checks::{check_edl, check_metric, check_rdm, CheckReport};
use antiuav_core::io::{
    evaluate_files, load_experiment_config, render_eval_report, render_summary,
    write_experiment_outputs, ConfigOverrides,
};
use antiuav_core::metric::{Aggregation, Attribute, EvalConfig};
use antiuav_core::simulator::run_experiment;
use antiuav_core::Result;

#[derive(Parser)]
#[command(
    name = "antiuav",
    version,
    about = "Anti-UAV evaluation, simulation and self-checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score prediction files against annotation files with the Acc metric.
    Eval {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 0.3)]
        beta: f64,
        /// Also report Acc restricted to frames carrying this tag (e.g. FM).
        #[arg(long)]
        attribute: Option<Attribute>,
        /// Weight the dataset mean by frame count instead of per sequence.
        #[arg(long)]
        per_frame: bool,
    },
    /// Run a seeded experiment from a config file and write result tables.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// Default θ_eh for arms that do not set one.
        #[arg(long)]
        theta_eh: Option<f64>,
        /// Default θ_det for arms that do not set one.
        #[arg(long)]
        theta_det: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Run a property suite and report failing cases by seed.
    Check {
        target: CheckTarget,
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the EDL loss used by the finite-difference side; the
        /// suite is expected to fail.
        #[arg(long)]
        mutate: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckTarget {
    Edl,
    Rdm,
    Metric,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Eval {
            annotations,
            predictions,
            alpha,
            beta,
            attribute,
            per_frame,
        } => {
            let config = EvalConfig::new(alpha, beta)?;
            let how = if per_frame {
                Aggregation::PerFrame
            } else {
                Aggregation::PerSequence
            };
            let report = evaluate_files(&annotations, &predictions, &config, how, attribute)?;
            print!("{}", render_eval_report(&report));
            Ok(true)
        }
        Command::Simulate {
            config,
            out,
            seed,
            trials,
            theta_eh,
            theta_det,
            alpha,
            beta,
        } => {
            let mut cfg = load_experiment_config(&config)?;
            cfg.apply(&ConfigOverrides {
                base_seed: seed,
                trials,
                theta_eh,
                theta_det,
                alpha,
                beta,
            })?;
            let spec = cfg.resolve()?;
            let table = run_experiment(&spec)?;
            write_experiment_outputs(&out, &spec, &table)?;
            print!("{}", render_summary(&table));
            Ok(true)
        }
        Command::Check {
            target,
            cases,
            seed,
            mutate,
        } => {
            let report = match target {
                CheckTarget::Edl => check_edl(cases.unwrap_or(10_000), seed, mutate),
                CheckTarget::Rdm => check_rdm(cases.unwrap_or(1_000), seed),
                CheckTarget::Metric => check_metric(cases.unwrap_or(10_000), seed),
            };
            print_check(&report);
            Ok(report.passed())
        }
    }
}

fn print_check(report: &CheckReport) {
    let failed = report.failures.len();
    println!(
        "check {}: {} cases, {} checks, {} failed",
        report.target, report.cases, report.checks_run, failed
    );
    for f in report.failures.iter().take(20) {
        println!("  FAIL case {} seed {}: {}", f.case, f.seed, f.detail);
    }
    if failed > 20 {
        println!("  ... {} more", failed - 20);
    }
    println!("{}", if failed == 0 { "PASS" } else { "FAIL" });
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
