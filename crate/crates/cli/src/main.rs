//! `mec-bazaar`: generate scenarios, run DTOA, and verify equilibria.
//!
//! Exit codes: 0 ok, 1 I/O or file content, 2 usage or invalid parameters,
//! 3 iteration cap reached, 4 degenerate market, 5 two-supplier market,
//! 6 customer ε-Nash violation, 7 other verification failure.
//! Stdout carries only the paths of written files; diagnostics go to stderr,
//! with verbosity from `MEC_BAZAAR_LOG`.

mod overrides;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mec_bazaar::games::RunStatus;
use mec_bazaar::market::aggregate_loads;
use mec_bazaar::oracle::{
    best_response, check_gradients, solve_supplier_equilibrium, verify_supplier_equilibrium,
    GradientReport, SupplierVerification,
};
use mec_bazaar::scenario_io::{final_strategies, load_result, save_bundle, ResultBundle};
use mec_bazaar::{
    build_report, compute_baseline, emit, generate_scenario, load_scenario, run_dtoa_with,
    save_scenario, GenerationParams, IoError, MarketError, OracleError, ReportFormat, RunOptions,
    Scenario,
};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CAP: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;
const EXIT_TWO_SUPPLIERS: u8 = 5;
const EXIT_NASH: u8 = 6;
const EXIT_TOLERANCE: u8 = 7;

#[derive(Parser)]
#[command(
    name = "mec-bazaar",
    version,
    about = "Edge-computing resource market simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded scenario file.
    Gen(GenArgs),
    /// Run DTOA and write the result bundle, report and manifest.
    Run(RunArgs),
    /// Solve and verify equilibria independently.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of terminal entities N.
    #[arg(long, default_value_t = 1000)]
    tes: usize,
    /// Number of edge servers M.
    #[arg(long, default_value_t = 10)]
    ess: usize,
    /// Number of slots T.
    #[arg(long, default_value_t = 24)]
    slots: usize,
    /// Generation parameter override, e.g. `a2.max=1e-4` or `solver.eta2_init=0.005`.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Keep every k-th iteration (and the last) in trace.csv.
    #[arg(long)]
    trace_stride: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Scenario field override, e.g. `solver.eta2_init=0.02`.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Only this slot; all slots by default.
    #[arg(long)]
    slot: Option<usize>,
    /// Result directory whose final strategies are checked.
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "output", default_value = "oracle.json")]
    output: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::new(EXIT_IO, e.to_string())
    }
}

impl From<MarketError> for Failure {
    fn from(e: MarketError) -> Self {
        let code = match e {
            MarketError::DegenerateMarket { .. } => EXIT_DEGENERATE,
            MarketError::InvalidField { .. } => EXIT_USAGE,
            _ => EXIT_TOLERANCE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Market(m) => m.into(),
            OracleError::TwoSupplierDegenerate => Failure::new(EXIT_TWO_SUPPLIERS, e.to_string()),
            other => Failure::new(EXIT_TOLERANCE, other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEC_BAZAAR_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_params(raw: &[String]) -> Result<Vec<(String, Value)>, Failure> {
    raw.iter()
        .map(|p| overrides::parse_param(p).map_err(|m| Failure::new(EXIT_USAGE, m)))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    fs::write(path, text + "\n")
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn cmd_gen(args: GenArgs) -> Result<u8, Failure> {
    if args.tes == 0 {
        return Err(Failure::new(EXIT_USAGE, "--tes: N >= 1 required, got 0"));
    }
    if args.ess < 2 {
        return Err(Failure::new(
            EXIT_USAGE,
            format!("--ess: M >= 2 required, got {}", args.ess),
        ));
    }
    if args.slots == 0 {
        return Err(Failure::new(EXIT_USAGE, "--slots: T >= 1 required, got 0"));
    }
    let base = GenerationParams {
        num_es: args.ess,
        num_te: args.tes,
        num_slots: args.slots,
        seed: args.seed,
        ..Default::default()
    };
    let params: GenerationParams = overrides::apply(&base, &parse_params(&args.params)?)
        .map_err(|m| Failure::new(EXIT_USAGE, m))?;
    let scenario =
        generate_scenario(&params).map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    save_scenario(&args.output, &scenario)?;
    println!("{}", args.output.display());
    Ok(0)
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    scenario_file: String,
    scenario_sha256: String,
    seed: u64,
    overrides: Vec<String>,
    epsilon: Option<f64>,
    max_iter: Option<usize>,
    trace_stride: Option<usize>,
    threads: Option<usize>,
    started_at: String,
    finished_at: String,
    status: RunStatus,
    iterations: usize,
}

fn cmd_run(args: RunArgs) -> Result<u8, Failure> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let raw = fs::read(&args.scenario)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", args.scenario.display())))?;
    let loaded: Scenario = load_scenario(&args.scenario)?;
    let mut params = parse_params(&args.params)?;
    if let Some(e) = args.epsilon {
        params.push(("solver.epsilon".into(), Value::from(e)));
    }
    if let Some(k) = args.max_iter {
        params.push(("solver.max_iterations".into(), Value::from(k)));
    }
    let scenario: Scenario =
        overrides::apply(&loaded, &params).map_err(|m| Failure::new(EXIT_USAGE, m))?;
    scenario
        .validate()
        .map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    if args.trace_stride == Some(0) {
        return Err(Failure::new(EXIT_USAGE, "--trace-stride must be >= 1"));
    }
    if args.threads == Some(0) {
        return Err(Failure::new(EXIT_USAGE, "--threads must be >= 1"));
    }

    let options = RunOptions {
        threads: args.threads,
        snapshot_stride: None,
    };
    let clock = Instant::now();
    let result = run_dtoa_with(&scenario, &options)?;
    let runtime = clock.elapsed();
    log::info!(
        "DTOA {:?} after {} iterations in {:.3}s",
        result.status,
        result.iterations_used,
        runtime.as_secs_f64()
    );
    let baseline = compute_baseline(&scenario)?;
    let report = build_report(&scenario, &baseline, &result, runtime)?;

    let mut bundle = ResultBundle::from_result(&scenario, &result);
    if let Some(k) = args.trace_stride {
        let last = result.iterations_used;
        bundle
            .trace
            .retain(|r| r.iteration % k == 0 || r.iteration == last);
    }
    let mut written = save_bundle(&args.out_dir, &bundle)?;
    written.extend(emit(&report, &args.out_dir, ReportFormat::Csv)?);

    let stored = args.out_dir.join("scenario.json");
    fs::write(&stored, &raw)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", stored.display())))?;
    written.push(stored);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        scenario_file: "scenario.json".into(),
        scenario_sha256: hex::encode(Sha256::digest(&raw)),
        seed: scenario.seed,
        overrides: args.params.clone(),
        epsilon: args.epsilon,
        max_iter: args.max_iter,
        trace_stride: args.trace_stride,
        threads: args.threads,
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        status: result.status,
        iterations: result.iterations_used,
    };
    let manifest_path = args.out_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    written.push(manifest_path);

    for p in &written {
        println!("{}", p.display());
    }
    Ok(match result.status {
        RunStatus::Converged => 0,
        RunStatus::IterationCapReached => {
            eprintln!(
                "iteration cap reached after {} iterations",
                result.iterations_used
            );
            EXIT_CAP
        }
    })
}

#[derive(Serialize)]
struct SlotReport {
    slot: usize,
    load: f64,
    price: f64,
    supplies: Vec<f64>,
    implied_bids: Vec<f64>,
    residual: f64,
    verification: SupplierVerification,
}

#[derive(Serialize)]
struct NashReport {
    /// Largest best-response gain relative to `|u_i|`.
    max_relative_gain: f64,
    worst_te: usize,
    tolerance: f64,
    passed: bool,
}

#[derive(Serialize)]
struct OracleReport {
    demand_source: String,
    slots: Vec<SlotReport>,
    gradients: GradientReport,
    eps_nash: Option<NashReport>,
    passed: bool,
}

const RESIDUAL_TOL: f64 = 1e-9;
const NASH_TOL: f64 = 1e-3;

fn cmd_oracle(args: OracleArgs) -> Result<u8, Failure> {
    let scenario: Scenario = load_scenario(&args.scenario)?;
    let strategies = match &args.result {
        Some(dir) => {
            let bundle = load_result::<f64>(dir)?;
            Some(
                final_strategies(&bundle, &scenario)
                    .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))?,
            )
        }
        None => None,
    };
    let demand = strategies
        .as_ref()
        .map_or_else(|| scenario.initial_demand(), |(_, d)| d.clone());
    let loads = aggregate_loads(&demand, &scenario.base_demand)?;
    let slots: Vec<usize> = match args.slot {
        Some(t) if t >= scenario.num_slots => {
            return Err(Failure::new(
                EXIT_USAGE,
                format!("--slot {t} out of range 0..{}", scenario.num_slots),
            ))
        }
        Some(t) => vec![t],
        None => (0..scenario.num_slots).collect(),
    };

    let mut slot_reports = Vec::with_capacity(slots.len());
    for t in slots {
        let eq =
            solve_supplier_equilibrium(loads[t], &scenario.cost_coeffs, 1e-10).map_err(|e| {
                let f = Failure::from(e);
                Failure::new(f.code, format!("slot {t}: {}", f.message))
            })?;
        let verification =
            verify_supplier_equilibrium(&eq, &scenario.cost_coeffs, loads[t], 200, args.seed)?;
        slot_reports.push(SlotReport {
            slot: t,
            load: loads[t],
            price: eq.price,
            supplies: eq.supplies,
            implied_bids: eq.implied_bids,
            residual: eq.residual,
            verification,
        });
    }
    let gradients = check_gradients(&scenario, args.samples, args.seed)?;
    let gradients_ok = gradients.passed;

    let eps_nash = match &strategies {
        Some((bids, chi)) => {
            let mut worst = (0.0f64, 0usize);
            for i in 0..scenario.num_te {
                let br = best_response(&scenario, chi, i, bids)?;
                let rel = br.gain / br.payoff_current.abs().max(f64::MIN_POSITIVE);
                if rel > worst.0 {
                    worst = (rel, i);
                }
            }
            Some(NashReport {
                max_relative_gain: worst.0,
                worst_te: worst.1,
                tolerance: NASH_TOL,
                passed: worst.0 <= NASH_TOL,
            })
        }
        None => None,
    };

    let suppliers_ok = slot_reports
        .iter()
        .all(|s| s.verification.passed && s.residual <= RESIDUAL_TOL);
    let nash_ok = eps_nash.as_ref().is_none_or(|n| n.passed);
    let report = OracleReport {
        demand_source: match &args.result {
            Some(d) => d.display().to_string(),
            None => "initial".into(),
        },
        slots: slot_reports,
        gradients,
        eps_nash,
        passed: suppliers_ok && nash_ok && gradients_ok,
    };
    write_json(&args.output, &report)?;
    println!("{}", args.output.display());

    if !nash_ok {
        let n = report.eps_nash.as_ref().expect("checked above");
        eprintln!(
            "ε-Nash violated: TE {} gains {:.3e} of its payoff by deviating (tolerance {:.0e})",
            n.worst_te, n.max_relative_gain, NASH_TOL
        );
        return Ok(EXIT_NASH);
    }
    if !suppliers_ok || !gradients_ok {
        eprintln!(
            "verification failed: supplier checks {suppliers_ok}, gradient checks {gradients_ok}"
        );
        return Ok(EXIT_TOLERANCE);
    }
    Ok(0)
}
