//! Command-line front end: validate inputs, solve the dispatch problem,
//! run monitoring scenarios, and emit trace tables plus plot-ready
//! series files.
//!
//! Exit codes are a stable contract: 0 success, 1 runtime failure,
//! 2 input validation failure, 3 solver non-convergence.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use gridwatch_core::dopf::{solve_dopf, DopfError, DopfSolution, SolverOptions};
use gridwatch_core::grid::{decouple, parse_case, Network};
use gridwatch_core::probing::ProbeBus;
use gridwatch_core::sim::{self, ProbeSource, Scenario, SimRun};

const EXIT_OK: u8 = 0;
const EXIT_RUNTIME: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "gridwatch",
    version,
    about = "Prosumer grid dispatch, probing-based anomaly detection, and isolation simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a case file (and optionally a scenario) without running.
    Validate {
        /// Network case file (TOML).
        #[arg(long)]
        case: PathBuf,
        /// Scenario file to validate against the case.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Compute the dispatch schedule and print the consensus history.
    Solve {
        /// Network case file (TOML).
        #[arg(long)]
        case: PathBuf,
        /// Directory for solve_report.json; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on outer consensus iterations.
        #[arg(long)]
        max_iters: Option<usize>,
        /// Consensus tolerance on auxiliary-pair residuals, per-unit.
        #[arg(long)]
        eps_consensus: Option<f64>,
    },
    /// Simulate a scenario and write traces, series files, and a report.
    Run {
        /// Network case file (TOML).
        #[arg(long)]
        case: PathBuf,
        /// Scenario file (TOML).
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Replay a captured probe trace instead of synthesizing probes.
        #[arg(long)]
        probes: Option<PathBuf>,
        /// Cap on outer consensus iterations (solve-mode references).
        #[arg(long)]
        max_iters: Option<usize>,
        /// Consensus tolerance, per-unit (solve-mode references).
        #[arg(long)]
        eps_consensus: Option<f64>,
        /// Replace the scenario's seed in the run record.
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { case, scenario } => cmd_validate(&case, scenario.as_deref()),
        Command::Solve {
            case,
            out,
            max_iters,
            eps_consensus,
        } => cmd_solve(&case, out.as_deref(), max_iters, eps_consensus),
        Command::Run {
            case,
            scenario,
            out,
            probes,
            max_iters,
            eps_consensus,
            seed_override,
        } => cmd_run(
            &case,
            &scenario,
            &out,
            probes.as_deref(),
            max_iters,
            eps_consensus,
            seed_override,
        ),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

/// One entry of the machine-readable validation error list.
fn issue(stage: &str, path: &Path, message: impl ToString) -> Value {
    json!({
        "stage": stage,
        "path": path.display().to_string(),
        "message": message.to_string(),
    })
}

/// Reads and parses a case file, appending any problem to `errors`.
fn load_case(path: &Path, errors: &mut Vec<Value>) -> Option<Network> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            errors.push(issue("case", path, format!("unreadable: {e}")));
            return None;
        }
    };
    match parse_case(&text) {
        Ok(net) => Some(net),
        Err(e) => {
            errors.push(issue("case", path, e));
            None
        }
    }
}

/// Reads, parses, and (when a network is at hand) cross-validates a
/// scenario file.
fn load_scenario(path: &Path, net: Option<&Network>, errors: &mut Vec<Value>) -> Option<Scenario> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            errors.push(issue("scenario", path, format!("unreadable: {e}")));
            return None;
        }
    };
    let scenario = match Scenario::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            errors.push(issue("scenario", path, e));
            return None;
        }
    };
    if let Some(net) = net {
        if let Err(e) = scenario.validate_against(net) {
            errors.push(issue("scenario", path, e));
            return None;
        }
    }
    Some(scenario)
}

fn options_from(max_iters: Option<usize>, eps_consensus: Option<f64>) -> SolverOptions {
    let mut opts = SolverOptions::default();
    if let Some(n) = max_iters {
        opts.max_iters = n;
    }
    if let Some(e) = eps_consensus {
        opts.eps_consensus = e;
    }
    opts
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_validate(case: &Path, scenario: Option<&Path>) -> anyhow::Result<u8> {
    let mut errors = Vec::new();
    let net = load_case(case, &mut errors);
    let parsed = scenario.and_then(|p| load_scenario(p, net.as_ref(), &mut errors));

    if !errors.is_empty() {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "status": "invalid", "errors": errors }))
                .expect("report serializes")
        );
        return Ok(EXIT_VALIDATION);
    }
    let net = net.expect("no errors implies a parsed case");
    let mut report = json!({
        "status": "ok",
        "case": case.display().to_string(),
        "prosumers": net.prosumer_count(),
        "lines": net.line_count(),
    });
    if let (Some(path), Some(s)) = (scenario, parsed) {
        report["scenario"] = json!({
            "path": path.display().to_string(),
            "horizon": s.horizon,
            "injections": s.injections.len(),
        });
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(EXIT_OK)
}

fn print_solution(sol: &DopfSolution) {
    println!("dispatch schedule:");
    for (id, r) in sol.schedule.iter() {
        println!("  {id:<8} {:>10.3} MW {:>10.3} MVAr", r.p_mw, r.q_mvar);
    }
    println!(
        "consensus: {} iterations, {:.1} ms",
        sol.iterations(),
        sol.wall_ms
    );
    if !sol.history.is_empty() {
        println!("{:>6} {:>14} {:>8} {:>14}", "iter", "max_residual", "step", "merit");
        for rec in &sol.history {
            println!(
                "{:>6} {:>14.6e} {:>8.3} {:>14.6e}",
                rec.iteration, rec.max_residual, rec.step_length, rec.merit
            );
        }
    }
}

fn solve_report(case: &Path, opts: &SolverOptions, body: Value) -> Value {
    let mut report = json!({
        "case": case.display().to_string(),
        "options": {
            "eps_consensus": opts.eps_consensus,
            "max_iters": opts.max_iters,
        },
    });
    for (k, v) in body.as_object().expect("body is an object") {
        report[k] = v.clone();
    }
    report
}

fn cmd_solve(
    case: &Path,
    out: Option<&Path>,
    max_iters: Option<usize>,
    eps_consensus: Option<f64>,
) -> anyhow::Result<u8> {
    let mut errors = Vec::new();
    let Some(net) = load_case(case, &mut errors) else {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "status": "invalid", "errors": errors }))
                .expect("report serializes")
        );
        return Ok(EXIT_VALIDATION);
    };
    let opts = options_from(max_iters, eps_consensus);
    let (report, code) = match solve_dopf(&decouple(&net), &opts) {
        Ok(sol) => {
            print_solution(&sol);
            let schedule: Value = sol
                .schedule
                .iter()
                .map(|(id, r)| (id.to_string(), json!({ "p_mw": r.p_mw, "q_mvar": r.q_mvar })))
                .collect::<serde_json::Map<String, Value>>()
                .into();
            let final_residual = sol.history.last().map(|r| r.max_residual);
            (
                solve_report(
                    case,
                    &opts,
                    json!({
                        "status": "ok",
                        "iterations": sol.iterations(),
                        "final_residual": final_residual,
                        "wall_ms": sol.wall_ms,
                        "schedule": schedule,
                    }),
                ),
                EXIT_OK,
            )
        }
        Err(
            e @ (DopfError::NonConvergence { .. }
            | DopfError::LineSearchStall { .. }
            | DopfError::LocalSolveFailed { .. }
            | DopfError::SingularConsensus { .. }),
        ) => {
            eprintln!("solver failed: {e}");
            let history = match &e {
                DopfError::NonConvergence { history, .. }
                | DopfError::LineSearchStall { history, .. } => history.as_slice(),
                _ => &[],
            };
            (
                solve_report(
                    case,
                    &opts,
                    json!({
                        "status": "nonconverged",
                        "error": e.to_string(),
                        "iterations": history.len(),
                        "final_residual": history.last().map(|r| r.max_residual),
                    }),
                ),
                EXIT_NONCONVERGENCE,
            )
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_json(&dir.join("solve_report.json"), &report)?;
    } else if code != EXIT_OK {
        // Keep the report available even without --out.
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
    }
    Ok(code)
}

/// Creates `name` under `dir` and streams `write` into it.
fn emit(
    dir: &Path,
    name: &str,
    write: impl FnOnce(File) -> anyhow::Result<()>,
) -> anyhow::Result<String> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write(file).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.display().to_string())
}

fn run_report(outcome: &SimRun, seed: u64) -> Value {
    let trace = &outcome.trace;
    let mut max_factor: std::collections::BTreeMap<String, f64> = trace
        .watched
        .iter()
        .map(|id| (id.to_string(), 0.0))
        .collect();
    for row in &trace.detection {
        let slot = max_factor.entry(row.target.to_string()).or_insert(0.0);
        *slot = slot.max(row.f);
    }
    let events: Vec<Value> = trace
        .isolations
        .iter()
        .map(|e| {
            json!({
                "interval": e.interval,
                "target": e.target.to_string(),
                "effective_from": e.effective_from,
                "partition_warning": e.partition_warning,
            })
        })
        .collect();
    let solver_calls: Vec<Value> = outcome
        .solver_calls
        .iter()
        .map(|c| {
            json!({
                "valid_from": c.valid_from,
                "iterations": c.iterations,
                "wall_ms": c.wall_ms,
            })
        })
        .collect();
    json!({
        "status": "ok",
        "seed": seed,
        "horizon": trace.horizon,
        "max_factor": max_factor,
        "isolation_events": events,
        "solver_calls": solver_calls,
    })
}

fn cmd_run(
    case: &Path,
    scenario_path: &Path,
    out: &Path,
    probes: Option<&Path>,
    max_iters: Option<usize>,
    eps_consensus: Option<f64>,
    seed_override: Option<u64>,
) -> anyhow::Result<u8> {
    let mut errors = Vec::new();
    let net = load_case(case, &mut errors);
    let scenario = load_scenario(scenario_path, net.as_ref(), &mut errors);
    let source = match probes {
        None => Some(ProbeSource::Synthesize),
        Some(path) => match File::open(path)
            .map_err(anyhow::Error::from)
            .and_then(|f| ProbeBus::read_trace(f).map_err(Into::into))
        {
            Ok(bus) => Some(ProbeSource::Replay(bus)),
            Err(e) => {
                errors.push(issue("probes", path, format!("{e:#}")));
                None
            }
        },
    };
    if !errors.is_empty() {
        println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "status": "invalid", "errors": errors }))
                .expect("report serializes")
        );
        return Ok(EXIT_VALIDATION);
    }
    let net = net.expect("no errors implies a parsed case");
    let mut scenario = scenario.expect("no errors implies a parsed scenario");
    if let Some(seed) = seed_override {
        scenario.seed = seed;
    }
    let opts = options_from(max_iters, eps_consensus);

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = match sim::run(&net, &scenario, opts, source.expect("checked above")) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("run failed: {e}");
            write_json(
                &out.join("report.json"),
                &json!({
                    "status": "error",
                    "interval": e.interval,
                    "message": e.to_string(),
                }),
            )?;
            return Ok(EXIT_RUNTIME);
        }
    };

    let trace = &outcome.trace;
    let mut artifacts = vec![
        emit(out, "detection.csv", |f| Ok(trace.write_detector_csv(f)?))?,
        emit(out, "penalty.csv", |f| Ok(trace.write_penalty_csv(f)?))?,
        emit(out, "utility.csv", |f| Ok(trace.write_utility_csv(f)?))?,
        emit(out, "probes.csv", |f| Ok(outcome.bus.write_trace(f)?))?,
        emit(out, "series_power.csv", |f| {
            Ok(trace.write_power_series(f)?)
        })?,
        emit(out, "series_factor.csv", |f| {
            Ok(trace.write_factor_series(f)?)
        })?,
        emit(out, "series_penalty.csv", |f| {
            Ok(trace.write_penalty_series(f)?)
        })?,
        emit(out, "series_isolation.csv", |f| {
            Ok(trace.write_isolation_series(f)?)
        })?,
    ];

    let mut report = run_report(&outcome, scenario.seed);
    let report_path = out.join("report.json");
    artifacts.push(report_path.display().to_string());
    report["artifacts"] = json!(artifacts);
    write_json(&report_path, &report)?;

    println!(
        "ran {} intervals on {} ({} prosumers)",
        trace.horizon,
        case.display(),
        net.prosumer_count()
    );
    for (target, f) in report["max_factor"].as_object().expect("object") {
        println!("  max F[{target}] = {}", f);
    }
    if trace.isolations.is_empty() {
        println!("  no isolations");
    }
    for e in &trace.isolations {
        println!(
            "  isolated {} in interval {} (effective from {})",
            e.target, e.interval, e.effective_from
        );
    }
    println!("artifacts in {}", out.display());
    Ok(EXIT_OK)
}
