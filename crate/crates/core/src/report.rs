//! Solve reports, per-iteration trace rows and their CSV encodings.
//!
//! Numbers are written with Rust's `Display` for `f64`, which prints the shortest decimal
//! string that parses back to the same value, so traces are byte-stable across runs.

use std::fmt::Write as _;

use crate::admm::DirectionState;
use crate::kkt::{merit_norm_sq, surrogate_gap, Direction, Iterate, ResidualBundle};
use crate::problem::CoupledProblem;

/// Header of the outer-iteration trace.
pub const TRACE_HEADER: &str = "method,l,merit,r_primal_sq,r_dual_sq,gap,mu,alpha,inner_iters,objective";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Exact,
    Inexact,
    #[serde(rename = "baseline")]
    Baseline,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Exact, Method::Inexact, Method::Baseline];

    /// Tag written into trace rows.
    pub fn tag(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Inexact => "inexact",
            Method::Baseline => "baseline-admm",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Why the outer loop stopped.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// Step size collapsed or a line search ran out of contractions.
    Stall(String),
    /// Non-finite values, singular systems or failed factorizations.
    NumericalFailure(String),
}

impl Termination {
    pub fn is_converged(&self) -> bool {
        matches!(self, Termination::Converged)
    }
}

/// One row of the outer trace; row `l` describes the iterate `z^(l)`, and `mu`, `alpha`,
/// `inner_iters` are the values that produced it (zero for row 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub method: Method,
    pub l: usize,
    pub merit: f64,
    pub r_primal_sq: f64,
    pub r_dual_sq: f64,
    pub gap: f64,
    pub mu: f64,
    pub alpha: f64,
    pub inner_iters: usize,
    pub objective: f64,
}

impl TraceRow {
    #[allow(clippy::too_many_arguments)]
    pub fn from_bundles(
        method: Method,
        l: usize,
        problem: &CoupledProblem,
        z: &Iterate,
        bundles: &[ResidualBundle],
        mu: f64,
        alpha: f64,
        inner_iters: usize,
    ) -> Self {
        Self {
            method,
            l,
            merit: merit_norm_sq(bundles).sqrt(),
            r_primal_sq: bundles.iter().map(ResidualBundle::primal_sq).sum(),
            r_dual_sq: bundles.iter().map(ResidualBundle::dual_sq).sum(),
            gap: surrogate_gap(bundles),
            mu,
            alpha,
            inner_iters,
            objective: problem.objective_local(&z.w),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method.tag(),
            self.l,
            self.merit,
            self.r_primal_sq,
            self.r_dual_sq,
            self.gap,
            self.mu,
            self.alpha,
            self.inner_iters,
            self.objective
        )
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Forcing quantities of one inexact outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingRow {
    pub l: usize,
    pub sigma: f64,
    pub eta_hat: f64,
    pub eta_bar: f64,
    pub mu: f64,
    pub eps_pri_max: f64,
    pub eps_dual_max: f64,
    /// `‖r̂‖` at inner exit and the bound `η̂ Σ sᵀλ / m` it must respect.
    pub r_hat: f64,
    pub r_hat_bound: f64,
}

pub const FORCING_HEADER: &str = "l,sigma,eta_hat,eta_bar,mu,eps_pri_max,eps_dual_max,r_hat,r_hat_bound";

pub fn forcing_csv(rows: &[ForcingRow]) -> String {
    let mut out = String::from(FORCING_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.l, r.sigma, r.eta_hat, r.eta_bar, r.mu, r.eps_pri_max, r.eps_dual_max, r.r_hat, r.r_hat_bound
        );
    }
    out
}

/// Per-inner-iteration record, kept only when inner tracing is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerRow {
    pub l: usize,
    pub k: usize,
    pub dual_res_max: f64,
    pub primal_c_max: f64,
    pub primal_eq_max: f64,
}

pub const INNER_HEADER: &str = "l,k,dual_res_max,primal_c_max,primal_eq_max";

pub fn inner_csv(rows: &[InnerRow]) -> String {
    let mut out = String::from(INNER_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.l, r.k, r.dual_res_max, r.primal_c_max, r.primal_eq_max);
    }
    out
}

/// Full record of one outer step, kept when history is requested so invariants can be
/// re-checked after the fact.
#[derive(Debug, Clone)]
pub struct OuterRecord {
    /// Iterate the step started from.
    pub iterate: Iterate,
    pub direction: Direction,
    pub mu: f64,
    pub alpha: f64,
    pub inner_iters: usize,
    pub exhausted: bool,
    /// `η̄` for inexact steps (the accepted merit factor is `1 − β α (1 − η̄)`).
    pub eta_bar: Option<f64>,
    /// Inner state at exit, for residual re-assembly.
    pub inner_state: Option<DirectionState>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub method: Method,
    pub iterate: Iterate,
    pub outer_iters: usize,
    pub total_inner_iters: usize,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    /// Outer steps whose inner solve hit its iteration cap.
    pub inner_exhaustions: usize,
    pub forcing: Vec<ForcingRow>,
    pub inner: Vec<InnerRow>,
    pub history: Vec<OuterRecord>,
    /// Scalar units sent over the simulated network.
    pub message_units: usize,
}

impl SolveReport {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().map(|r| r.objective).unwrap_or(f64::NAN)
    }

    pub fn trace_csv(&self) -> String {
        trace_csv(&self.trace)
    }
}
