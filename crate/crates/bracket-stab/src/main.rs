//! Command-line front end.
//!
//! Exit codes: 0 ok, 2 config error, 3 audit failure, 4 numerical failure.

use bracket_stab::brackets::{enumerate_labels, Pruning};
use bracket_stab::scenario::{
    render_report, run_asymptotic_study, run_check, run_scenario, run_schedule_stage, Scenario,
    ScenarioError,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bracket-stab",
    about = "Lie-bracket feedback stabilization with cost regulation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker pool size for run batches.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sampled dissipative-inequality check only.
    Check(ScenarioArgs),
    /// Compute and print the step schedule (envelopes + constants).
    Schedule(ScenarioArgs),
    /// Full pipeline: check, schedule, runs, audits, artifacts.
    Simulate(ScenarioArgs),
    /// Order-fit study of the bracket expansion, one line per label.
    Asymptotic(ScenarioArgs),
    /// Enumerate control labels with degrees and switch numbers.
    Brackets {
        /// Number of control fields.
        #[arg(long)]
        m: usize,
        /// Degree bound.
        #[arg(long)]
        h: u32,
        /// Keep identically-zero labels.
        #[arg(long)]
        keep_zero: bool,
    },
}

fn load(args: &ScenarioArgs) -> Result<Scenario, ScenarioError> {
    let mut scenario = Scenario::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        scenario.config.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        scenario.config.jobs = jobs;
    }
    Ok(scenario)
}

/// Print without panicking when the reader has gone away (e.g. `| head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn fail(err: ScenarioError) -> ExitCode {
    eprintln!("error: {err}");
    let mut source = std::error::Error::source(&err);
    while let Some(s) = source {
        eprintln!("  caused by: {s}");
        source = s.source();
    }
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Check(args) => {
            let scenario = match load(&args) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            match run_check(&scenario, args.out.as_deref()) {
                Ok((summaries, all_pass)) => {
                    for (pair, s) in scenario.config.pairs.iter().zip(&summaries) {
                        emit(&format!(
                            "pair R={} r={}: {} over {} samples, max violation {:.6e}, {} violations, {} oracle failures\n",
                            pair.r_big,
                            pair.r_small,
                            if s.passed { "pass" } else { "FAIL" },
                            s.samples,
                            s.max_violation,
                            s.violations,
                            s.oracle_failures,
                        ));
                    }
                    if all_pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(3)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Schedule(args) => {
            let scenario = match load(&args) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            match run_schedule_stage(&scenario, args.out.as_deref()) {
                Ok(schedules) => {
                    for schedule in &schedules {
                        println!(
                            "pair R={} r={}: entry level {:.6}, exit level {:.6}",
                            schedule.r_big,
                            schedule.r_small,
                            schedule.entry_level,
                            schedule.u_big_r
                        );
                        for (i, ((d, dr), dd)) in schedule
                            .delta
                            .iter()
                            .zip(&schedule.delta_reach)
                            .zip(&schedule.delta_decrease)
                            .enumerate()
                        {
                            println!(
                                "  degree {}: delta = {:.8} (base {:.6}, reach {:.8}, decrease {:.8})",
                                i + 1,
                                d,
                                schedule.delta_base,
                                dr,
                                dd
                            );
                        }
                        println!(
                            "  T(R,r) = {:.6e}, J(R,r) = {:.6e}, overshoot bound = {:.6}, cost factor = {:.6e}",
                            schedule.time_bound,
                            schedule.iteration_bound,
                            schedule.overshoot_bound,
                            schedule.cost_factor
                        );
                        match serde_json::to_string_pretty(schedule) {
                            Ok(text) => println!("{text}"),
                            Err(e) => return fail(ScenarioError::Json(e)),
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Simulate(args) => {
            let scenario = match load(&args) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let out_dir = args
                .out
                .clone()
                .or_else(|| scenario.config.output_dir.clone().map(PathBuf::from));
            match run_scenario(&scenario, out_dir.as_deref()) {
                Ok(outcome) => {
                    emit(&render_report(&outcome.summary));
                    if let Some(dir) = &out_dir {
                        emit(&format!("artifacts written to {}\n", dir.display()));
                    }
                    if outcome.summary.all_pass {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(3)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Asymptotic(args) => {
            let scenario = match load(&args) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            match run_asymptotic_study(&scenario) {
                Ok(lines) => {
                    println!("label  degree  switches  slope  max_error  remainder");
                    for line in lines {
                        let slope = if line.exact_to_tolerance {
                            "exact".to_string()
                        } else {
                            line.slope
                                .map(|s| format!("{s:.3}"))
                                .unwrap_or_else(|| "-".into())
                        };
                        println!(
                            "{}  {}  {}  {}  {:.3e}  {:.3e}",
                            line.label,
                            line.degree,
                            line.switch_number,
                            slope,
                            line.max_error,
                            line.remainder_constant
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Brackets { m, h, keep_zero } => {
            let pruning = if keep_zero {
                Pruning::Keep
            } else {
                Pruning::ZeroBrackets
            };
            match enumerate_labels(m, h, pruning) {
                Ok(labels) => {
                    println!("label  degree  switch_number");
                    for label in &labels {
                        println!(
                            "{}  {}  {}",
                            label.text(),
                            label.degree(),
                            label.switch_number()
                        );
                    }
                    println!("total: {} labels", labels.len());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
