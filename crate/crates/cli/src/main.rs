//! `coupled-ipm`: generate loosely coupled QPs, solve them with any of the three methods,
//! and compare the methods on one instance.
//!
//! Exit codes: 0 converged, 2 iteration limit, 3 numerical failure, 4 configuration or
//! input error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use coupled_ipm::baseline::{self, reference_optimum, BaselineParams};
use coupled_ipm::ipm_exact::{self, ExactParams};
use coupled_ipm::ipm_inexact::{self, InexactParams};
use coupled_ipm::kkt::Iterate;
use coupled_ipm::problem::{generate, CoupledProblem, ProblemGenConfig};
use coupled_ipm::report::{forcing_csv, inner_csv, SolveReport, Termination};
use coupled_ipm::SolverError;
use serde::Deserialize;

const EXIT_MAX_ITER: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const CONFIG_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "coupled-ipm", version, about = "Distributed interior-point solvers for loosely coupled QPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the configured one.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap on the worker threads used for per-agent work.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a problem and write it as JSON.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Number of agents; overrides the configured generator.
        #[arg(long)]
        agents: Option<usize>,
        /// Use the ten-agent desk-scale generator instead of the default one.
        #[arg(long)]
        desk: bool,
    },
    /// Solve a problem with one method and write the per-iteration trace.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Run several methods on one problem and write a comparison table.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        problem: PathBuf,
        /// Methods to run (all three when omitted).
        #[arg(long, value_enum)]
        method: Vec<MethodArg>,
    },
}

#[derive(ValueEnum, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Exact,
    Inexact,
    Baseline,
}

#[derive(Deserialize, Debug, Clone, Copy, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
enum TraceLevel {
    #[default]
    Outer,
    Inner,
}

#[derive(Deserialize, Debug, Default)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    version: u32,
    method: Option<MethodArg>,
    seed: Option<u64>,
    #[serde(default)]
    trace: TraceLevel,
    #[serde(default)]
    generator: ProblemGenConfig,
    #[serde(default)]
    exact: ExactParams,
    #[serde(default)]
    inexact: InexactParams,
    #[serde(default)]
    baseline: BaselineParams,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self { version: CONFIG_VERSION, ..Default::default() });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(anyhow!("config version {} is not supported (expected {CONFIG_VERSION})", cfg.version));
        }
        Ok(cfg)
    }
}

/// Error paired with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn config_err(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_CONFIG, err: err.into() }
}

fn solver_err(err: SolverError) -> Failure {
    let code = match err {
        SolverError::Config(_) | SolverError::Format(_) | SolverError::Io(_) | SolverError::Structural(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    };
    Failure { code, err: err.into() }
}

fn termination_code(t: &Termination) -> u8 {
    match t {
        Termination::Converged => 0,
        Termination::MaxIterations => EXIT_MAX_ITER,
        Termination::Stall(_) | Termination::NumericalFailure(_) => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let common = match &cli.command {
        Command::Gen { common, .. } | Command::Solve { common, .. } | Command::Compare { common, .. } => common.clone(),
    };
    let cfg = RunConfig::load(common.config.as_deref()).map_err(config_err)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(config_err(anyhow!("--threads must be positive")));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(config_err)?;
    pool.install(|| match cli.command {
        Command::Gen { agents, desk, .. } => cmd_gen(&cfg, &common, agents, desk),
        Command::Solve { problem, method, .. } => cmd_solve(&cfg, &common, &problem, method),
        Command::Compare { problem, method, .. } => cmd_compare(&cfg, &common, &problem, &method),
    })
}

fn write_output(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())).map_err(config_err),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gen(cfg: &RunConfig, common: &Common, agents: Option<usize>, desk: bool) -> Result<u8, Failure> {
    let seed = common.seed.or(cfg.seed).unwrap_or(cfg.generator.seed);
    let mut gen = if desk { ProblemGenConfig::desk(seed) } else { cfg.generator.clone() };
    gen.seed = seed;
    if let Some(n) = agents {
        gen.agents = n;
    }
    let problem = generate(&gen).map_err(solver_err)?;
    write_output(common.out.as_deref(), &problem.to_json())?;
    eprintln!(
        "generated N={} n={} m={} p={} consistency={}",
        problem.num_agents(),
        problem.n,
        problem.total_ineq(),
        problem.total_eq(),
        problem.total_local()
    );
    Ok(0)
}

fn load_problem(path: &Path) -> Result<CoupledProblem, Failure> {
    CoupledProblem::load(path).map_err(|e| {
        let code = solver_err(e);
        Failure { code: EXIT_CONFIG, err: code.err.context(format!("loading {}", path.display())) }
    })
}

fn solve_with(cfg: &RunConfig, method: MethodArg, problem: &CoupledProblem, init: &Iterate) -> Result<SolveReport, Failure> {
    let inner = cfg.trace == TraceLevel::Inner;
    match method {
        MethodArg::Exact => {
            let p = ExactParams { record_inner: cfg.exact.record_inner || inner, ..cfg.exact.clone() };
            ipm_exact::solve(problem, init, &p)
        }
        MethodArg::Inexact => {
            let p = InexactParams { record_inner: cfg.inexact.record_inner || inner, ..cfg.inexact.clone() };
            ipm_inexact::solve(problem, init, &p)
        }
        MethodArg::Baseline => baseline::solve(problem, init, &cfg.baseline),
    }
    .map_err(solver_err)
}

/// `trace.csv` → `trace.<kind>.csv`.
fn sidecar(out: &Path, kind: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{kind}.csv"))
}

fn cmd_solve(cfg: &RunConfig, common: &Common, path: &Path, method: Option<MethodArg>) -> Result<u8, Failure> {
    let method = method.or(cfg.method).unwrap_or(MethodArg::Inexact);
    let problem = load_problem(path)?;
    let init = Iterate::initial(&problem, common.seed.or(cfg.seed).unwrap_or(0));
    let report = solve_with(cfg, method, &problem, &init)?;
    write_output(common.out.as_deref(), &report.trace_csv())?;
    if let Some(out) = common.out.as_deref() {
        if !report.forcing.is_empty() {
            write_output(Some(&sidecar(out, "forcing")), &forcing_csv(&report.forcing))?;
        }
        if !report.inner.is_empty() {
            write_output(Some(&sidecar(out, "inner")), &inner_csv(&report.inner))?;
        }
    }
    eprintln!(
        "{}: {:?} after {} outer / {} inner iterations, objective {:.10e}",
        report.method.tag(),
        report.termination,
        report.outer_iters,
        report.total_inner_iters,
        report.final_objective()
    );
    Ok(termination_code(&report.termination))
}

fn cmd_compare(cfg: &RunConfig, common: &Common, path: &Path, methods: &[MethodArg]) -> Result<u8, Failure> {
    let methods = if methods.is_empty() {
        vec![MethodArg::Exact, MethodArg::Inexact, MethodArg::Baseline]
    } else {
        methods.to_vec()
    };
    let problem = load_problem(path)?;
    let init = Iterate::initial(&problem, common.seed.or(cfg.seed).unwrap_or(0));
    let oracle = reference_optimum(&problem).map_err(solver_err)?.objective;
    let mut csv = String::from("method,outer_iters,total_inner_iters,rel_obj_error,wall_time_s\n");
    let mut code = 0;
    for m in methods {
        let t = Instant::now();
        let rep = solve_with(cfg, m, &problem, &init)?;
        let wall = t.elapsed().as_secs_f64();
        let rel = (rep.final_objective() - oracle).abs() / oracle.abs().max(1.0);
        csv.push_str(&format!(
            "{},{},{},{:e},{:.6}\n",
            rep.method.tag(),
            rep.outer_iters,
            rep.total_inner_iters,
            rel,
            wall
        ));
        code = code.max(termination_code(&rep.termination));
    }
    write_output(common.out.as_deref(), &csv)?;
    Ok(code)
}
