//! Distributed primal-dual interior-point method with (near-)exact ADMM directions.
//!
//! Each outer iteration: `μ = σ min_i η̂_i / Σm_i` by min-consensus, ADMM for the
//! direction, a per-agent fraction-to-boundary plus merit backtracking step, and a common
//! step `α = min_i α_i` so the consistency duals stay balanced.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmSettings, DirectionState, OuterSystem};
use crate::error::{Result, SolverError};
use crate::kkt::{all_residuals, AgentPoint, Direction, Iterate, ResidualBundle};
use crate::netsim::Network;
use crate::problem::{tolerance_scale, AgentSubproblem, CoupledProblem};
use crate::report::{InnerRow, Method, OuterRecord, SolveReport, Termination, TraceRow};

/// Smallest step accepted before the search is declared stalled.
pub const ALPHA_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactParams {
    /// Centering factor in `(0, 1)`.
    pub sigma: f64,
    /// Backtracking factor in `(0, 1)`.
    pub beta: f64,
    /// Sufficient-decrease constant, nominally in `[0.01, 0.1]`.
    pub gamma_ls: f64,
    /// Gap tolerance; `None` uses [`tolerance_scale`].
    pub eps: Option<f64>,
    /// Feasibility tolerance; `None` uses [`tolerance_scale`].
    pub eps_feas: Option<f64>,
    pub rho: f64,
    pub alpha_or: f64,
    /// Inner primal tolerance; `None` uses `(N/2)·1e-20`.
    pub eps_pri: Option<f64>,
    /// Inner dual tolerance; `None` uses `(N/2)·1e-20`.
    pub eps_dual: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub warm_start: bool,
    /// Keep iterates and directions of every outer step in the report.
    pub keep_history: bool,
    /// Record per-inner-iteration residual maxima.
    pub record_inner: bool,
}

impl Default for ExactParams {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            beta: 0.5,
            gamma_ls: 0.01,
            eps: None,
            eps_feas: None,
            rho: 0.5,
            alpha_or: 1.0,
            eps_pri: None,
            eps_dual: None,
            max_outer: 200,
            max_inner: 10_000,
            warm_start: true,
            keep_history: false,
            record_inner: false,
        }
    }
}

impl ExactParams {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.sigma) || !open(self.beta) || !open(self.gamma_ls) {
            return Err(SolverError::Config("σ, β and γ must lie in (0, 1)".into()));
        }
        if !(self.rho > 0.0) || !(1.0..2.0).contains(&self.alpha_or) {
            return Err(SolverError::Config("need ρ > 0 and α_OR ∈ [1, 2)".into()));
        }
        if self.max_inner == 0 {
            return Err(SolverError::Config("max_inner must be positive".into()));
        }
        Ok(())
    }
}

/// Stopping tolerances shared by all three methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopTolerances {
    pub eps: f64,
    pub eps_feas: f64,
}

impl StopTolerances {
    pub fn resolve(problem: &CoupledProblem, eps: Option<f64>, eps_feas: Option<f64>) -> Self {
        let scale = tolerance_scale(problem);
        Self { eps: eps.unwrap_or(scale), eps_feas: eps_feas.unwrap_or(scale) }
    }

    /// Per-agent test: `‖(r_p1, r_p2, r_c)‖² ≤ ε_feas²/N`, `‖r_dual‖² ≤ ε_feas²/N` and
    /// `η̂_i ≤ ε/N`.
    pub fn agent_done(&self, b: &ResidualBundle, n_agents: usize) -> bool {
        let n = n_agents as f64;
        let feas = self.eps_feas * self.eps_feas / n;
        b.primal_sq() <= feas && b.dual_sq() <= feas && b.eta_hat <= self.eps / n
    }
}

/// `σ min_i η̂_i / Σ m_i`.
pub fn perturbation(net: &mut Network, bundles: &[ResidualBundle], sigma: f64, m_total: usize) -> f64 {
    let gaps: Vec<f64> = bundles.iter().map(|b| b.eta_hat).collect();
    sigma * net.global_min(&gaps) / m_total.max(1) as f64
}

/// Largest step in `[0, 1]` keeping `λ + αΔλ ≥ 0`.
pub fn alpha_max(lambda: &nalgebra::DVector<f64>, dlambda: &nalgebra::DVector<f64>) -> f64 {
    lambda
        .iter()
        .zip(dlambda.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&l, &d)| -l / d)
        .fold(1.0, f64::min)
}

/// Merit decrease test `‖Hⁱ(α)‖² ≤ (1 − γα)²‖Hⁱ(0)‖²` together with strict interiority.
pub fn merit_ok(sub: &AgentSubproblem, pt: &AgentPoint, d: &AgentPoint, alpha: f64, gamma: f64, m0: f64) -> Result<bool> {
    let trial = pt.step(d, alpha);
    if trial.s.iter().chain(trial.lambda.iter()).any(|&e| e <= 0.0) {
        return Ok(false);
    }
    let m = trial.residuals(sub)?.merit_sq;
    let f = 1.0 - gamma * alpha;
    Ok(m <= f * f * m0)
}

/// Trial test for an agent that already meets its local stop test: the point must stay
/// strictly interior and keep meeting the test.
///
/// A settled agent's merit sits near round-off, so the second-order slack–multiplier term
/// of a direction driven by its unsettled neighbours would otherwise veto every useful step.
pub fn settled_ok(
    sub: &AgentSubproblem,
    pt: &AgentPoint,
    d: &AgentPoint,
    alpha: f64,
    tol: &StopTolerances,
    n_agents: usize,
) -> Result<bool> {
    let trial = pt.step(d, alpha);
    if trial.s.iter().chain(trial.lambda.iter()).any(|&e| e <= 0.0) {
        return Ok(false);
    }
    Ok(tol.agent_done(&trial.residuals(sub)?, n_agents))
}

/// Backtracking from `0.99 α_max`: shrink by `β` until the slacks stay positive, then
/// until `accept(α)` holds.
pub fn backtrack(
    sub: &AgentSubproblem,
    pt: &AgentPoint,
    d: &AgentPoint,
    beta: f64,
    accept: impl Fn(f64) -> Result<bool>,
) -> Result<f64> {
    let mut alpha = 0.99 * alpha_max(&pt.lambda, &d.lambda);
    while pt.s.iter().zip(d.s.iter()).any(|(&s, &ds)| s + alpha * ds <= 0.0) {
        alpha *= beta;
        if alpha < ALPHA_FLOOR {
            return Err(SolverError::Stall(format!("agent {}: slack positivity", sub.index)));
        }
    }
    while !accept(alpha)? {
        alpha *= beta;
        if alpha < ALPHA_FLOOR {
            return Err(SolverError::Stall(format!("agent {}: merit backtracking", sub.index)));
        }
    }
    Ok(alpha)
}

/// Per-agent step: [`backtrack`] with the merit decrease test.
pub fn local_step(sub: &AgentSubproblem, pt: &AgentPoint, d: &AgentPoint, beta: f64, gamma: f64) -> Result<f64> {
    let m0 = pt.residuals(sub)?.merit_sq;
    backtrack(sub, pt, d, beta, |a| merit_ok(sub, pt, d, a, gamma, m0))
}

/// Shared outer-loop bookkeeping for the interior-point methods.
pub(crate) struct OuterRun<'a> {
    pub problem: &'a CoupledProblem,
    pub method: Method,
    pub net: Network,
    pub z: Iterate,
    pub trace: Vec<TraceRow>,
    pub history: Vec<OuterRecord>,
    pub inner: Vec<InnerRow>,
    pub total_inner: usize,
    pub exhaustions: usize,
}

impl<'a> OuterRun<'a> {
    pub fn new(problem: &'a CoupledProblem, method: Method, init: &Iterate) -> Result<Self> {
        init.check_shapes(problem)?;
        if !init.is_strictly_interior() {
            return Err(SolverError::Domain("initial iterate is not strictly interior".into()));
        }
        if init.consistency_dual_drift(problem) > 1e-10 {
            return Err(SolverError::Domain("initial consistency duals are not balanced".into()));
        }
        Ok(Self {
            problem,
            method,
            net: Network::for_problem(problem),
            z: init.clone(),
            trace: Vec::new(),
            history: Vec::new(),
            inner: Vec::new(),
            total_inner: 0,
            exhaustions: 0,
        })
    }

    pub fn record(&mut self, bundles: &[ResidualBundle], mu: f64, alpha: f64, inner: usize) {
        let l = self.trace.len();
        self.trace.push(TraceRow::from_bundles(self.method, l, self.problem, &self.z, bundles, mu, alpha, inner));
    }

    /// Common step size: min-consensus over the local steps, then re-checked for every
    /// agent and reduced by `shrink` until all accept. `accept(i, α)` is the agent test.
    pub fn common_step(
        &mut self,
        local: &[f64],
        shrink: f64,
        accept: impl Fn(usize, f64) -> Result<bool> + Sync,
    ) -> Result<f64> {
        let mut alpha = self.net.global_min(local);
        loop {
            let flags: Vec<bool> = (0..self.problem.num_agents())
                .into_par_iter()
                .map(|i| accept(i, alpha))
                .collect::<Result<_>>()?;
            if self.net.flag_consensus(&flags) {
                return Ok(alpha);
            }
            alpha *= shrink;
            if alpha < ALPHA_FLOOR {
                return Err(SolverError::Stall("common step size".into()));
            }
        }
    }

    pub fn finish(self, termination: Termination) -> SolveReport {
        SolveReport {
            method: self.method,
            outer_iters: self.trace.len().saturating_sub(1),
            iterate: self.z,
            total_inner_iters: self.total_inner,
            trace: self.trace,
            termination,
            inner_exhaustions: self.exhaustions,
            forcing: Vec::new(),
            inner: self.inner,
            history: self.history,
            message_units: self.net.log.total_units,
        }
    }
}

/// Maps a solver error onto a termination reason; structural and configuration errors
/// are returned to the caller instead.
pub(crate) fn classify(err: SolverError) -> Result<Termination> {
    match err {
        SolverError::Stall(m) => Ok(Termination::Stall(m)),
        SolverError::NonFinite(m) | SolverError::SingularSystem(m) | SolverError::Domain(m) => {
            Ok(Termination::NumericalFailure(m))
        }
        e @ SolverError::Factorization { .. } | e @ SolverError::LocalSolve { .. } => {
            Ok(Termination::NumericalFailure(e.to_string()))
        }
        other => Err(other),
    }
}

/// Runs the exact distributed interior-point method from `init`.
pub fn solve(problem: &CoupledProblem, init: &Iterate, params: &ExactParams) -> Result<SolveReport> {
    params.validate()?;
    let tol = StopTolerances::resolve(problem, params.eps, params.eps_feas);
    let n_agents = problem.num_agents();
    let default_inner = n_agents as f64 / 2.0 * 1e-20;
    let settings = AdmmSettings::uniform(
        n_agents,
        params.rho,
        params.alpha_or,
        params.eps_pri.unwrap_or(default_inner),
        params.eps_dual.unwrap_or(default_inner),
        params.max_inner,
    );
    let m_total = problem.total_ineq();
    let mut run = OuterRun::new(problem, Method::Exact, init)?;
    let mut warm: Option<DirectionState> = None;
    let mut mu_prev = 0.0;
    let mut alpha_prev = 0.0;
    let mut inner_prev = 0;

    let termination = loop {
        let bundles = all_residuals(problem, &run.z)?;
        run.record(&bundles, mu_prev, alpha_prev, inner_prev);
        let done: Vec<bool> = bundles.iter().map(|b| tol.agent_done(b, n_agents)).collect();
        if run.net.flag_consensus(&done) {
            break Termination::Converged;
        }
        if run.trace.len() > params.max_outer {
            break Termination::MaxIterations;
        }
        match exact_step(&mut run, &bundles, &done, &tol, params, &settings, m_total, warm.take()) {
            Ok((mu, alpha, inner, state)) => {
                mu_prev = mu;
                alpha_prev = alpha;
                inner_prev = inner;
                if params.warm_start {
                    warm = Some(state);
                }
            }
            Err(e) => break classify(e)?,
        }
    };
    Ok(run.finish(termination))
}

#[allow(clippy::too_many_arguments)]
fn exact_step(
    run: &mut OuterRun,
    bundles: &[ResidualBundle],
    done: &[bool],
    tol: &StopTolerances,
    params: &ExactParams,
    settings: &AdmmSettings,
    m_total: usize,
    warm: Option<DirectionState>,
) -> Result<(f64, f64, usize, DirectionState)> {
    let problem = run.problem;
    let l = run.trace.len() - 1;
    let mu = perturbation(&mut run.net, bundles, params.sigma, m_total);
    let system = OuterSystem::build(problem, &run.z, mu, params.rho, l as u64)?;
    let outcome = if params.record_inner {
        let mut rows = Vec::new();
        let mut obs = |s: &admm::InnerSnapshot| rows.push(inner_row(l, s));
        let out = admm::run(problem, &run.z, &system, settings, warm, &mut run.net, Some(&mut obs))?;
        run.inner.extend(rows);
        out
    } else {
        admm::run(problem, &run.z, &system, settings, warm, &mut run.net, None)?
    };
    if outcome.exhausted {
        run.exhaustions += 1;
        log::debug!("outer {l}: ADMM hit max_inner = {}", settings.max_inner);
    }
    run.total_inner += outcome.inner_iters;
    let dir = outcome.direction;
    check_finite(&dir)?;

    let z = &run.z;
    let points: Vec<(AgentPoint, AgentPoint)> =
        (0..problem.num_agents()).map(|i| (z.agent(problem, i), dir.agent(problem, i))).collect();
    let n_agents = problem.num_agents();
    let m0: Vec<f64> = bundles.iter().map(|b| b.merit_sq).collect();
    let accept = |i: usize, a: f64| {
        let (sub, (pt, d)) = (&problem.agents[i], &points[i]);
        if done[i] {
            settled_ok(sub, pt, d, a, tol, n_agents)
        } else {
            merit_ok(sub, pt, d, a, params.gamma_ls, m0[i])
        }
    };
    let local: Vec<f64> = (0..n_agents)
        .into_par_iter()
        .map(|i| backtrack(&problem.agents[i], &points[i].0, &points[i].1, params.beta, |a| accept(i, a)))
        .collect::<Result<_>>()?;
    let alpha = run.common_step(&local, params.beta, accept)?;

    let next = run.z.step(&dir, alpha);
    if params.keep_history {
        run.history.push(OuterRecord {
            iterate: run.z.clone(),
            direction: dir,
            mu,
            alpha,
            inner_iters: outcome.inner_iters,
            exhausted: outcome.exhausted,
            eta_bar: None,
            inner_state: Some(outcome.state.clone()),
        });
    }
    run.z = next;
    Ok((mu, alpha, outcome.inner_iters, outcome.state))
}

pub(crate) fn inner_row(l: usize, s: &admm::InnerSnapshot) -> InnerRow {
    let max = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0, f64::max);
    InnerRow {
        l,
        k: s.k,
        dual_res_max: max(&mut s.dual_res.iter().copied()),
        primal_c_max: max(&mut s.primal_res.iter().map(|p| p.0)),
        primal_eq_max: max(&mut s.primal_res.iter().map(|p| p.1)),
    }
}

pub(crate) fn check_finite(d: &Direction) -> Result<()> {
    let bad = |v: &[nalgebra::DVector<f64>]| v.iter().any(|b| b.iter().any(|e| !e.is_finite()));
    if bad(&d.dw) || bad(&d.ds) || bad(&d.dlambda) || bad(&d.dv) || bad(&d.dv_c) || d.dx.iter().any(|e| !e.is_finite()) {
        return Err(SolverError::NonFinite("search direction".into()));
    }
    Ok(())
}
