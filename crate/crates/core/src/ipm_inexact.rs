//! Globally convergent inexact variant: ADMM is stopped early under a forcing sequence,
//! and steps are kept inside a centrality neighbourhood fixed at the starting point.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmSettings, DirectionState, OuterSystem};
use crate::error::{Result, SolverError};
use crate::ipm_exact::{check_finite, classify, inner_row, OuterRun, StopTolerances};
use crate::kkt::{all_residuals, AgentPoint, Iterate, ResidualBundle};
use crate::problem::{AgentSubproblem, CoupledProblem};
use crate::report::{ForcingRow, Method, OuterRecord, SolveReport, Termination};

/// Halvings of `η̂` tried before the forcing rule gives up.
pub const MAX_FORCING_HALVINGS: usize = 60;
/// Contractions tried by the merit line search.
pub const MAX_CONTRACTIONS: usize = 200;
/// Margin added to the σ lower bound so the inequality is strict.
pub const SIGMA_MARGIN: f64 = 0.01;
const GRID: usize = 64;
const BISECTIONS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InexactParams {
    /// Upper bound on `η̄ = σ + η̂`.
    pub eta_max: f64,
    /// Initial neighbourhood factor `γ⁰ ∈ [1/2, 1)`.
    pub gamma0: f64,
    /// Contraction of `γ` towards 1/2 per outer step, `γ ← 1/2 + κ(γ − 1/2)`; `κ = 1`
    /// keeps `γ` constant.
    pub gamma_decay: f64,
    /// Sufficient-decrease factor of the merit test.
    pub beta: f64,
    /// Step contraction factor.
    pub theta: f64,
    pub rho: f64,
    pub alpha_or: f64,
    /// Additive floor on σ.
    pub eps_sigma: f64,
    pub eps: Option<f64>,
    pub eps_feas: Option<f64>,
    pub max_outer: usize,
    pub max_inner: usize,
    pub warm_start: bool,
    pub keep_history: bool,
    pub record_inner: bool,
}

impl Default for InexactParams {
    fn default() -> Self {
        Self {
            eta_max: 0.9,
            gamma0: 0.9,
            gamma_decay: 0.8,
            beta: 0.1,
            theta: 0.95,
            rho: 0.5,
            alpha_or: 1.0,
            eps_sigma: 0.1,
            eps: None,
            eps_feas: None,
            max_outer: 300,
            max_inner: 10_000,
            warm_start: true,
            keep_history: false,
            record_inner: false,
        }
    }
}

impl InexactParams {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.eta_max) || !open(self.beta) || !open(self.theta) {
            return Err(SolverError::Config("η_max, β and θ must lie in (0, 1)".into()));
        }
        if !(0.5..1.0).contains(&self.gamma0) {
            return Err(SolverError::Config("γ must lie in [1/2, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_decay) {
            return Err(SolverError::Config("γ decay must lie in [0, 1]".into()));
        }
        if !(self.eps_sigma > 0.0) || self.eps_sigma + SIGMA_MARGIN >= self.eta_max {
            return Err(SolverError::Config("need 0 < ε_σ < η_max".into()));
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

/// Per-agent neighbourhood constants taken at the starting point:
/// `τ̄₁ = min(λ∘s)/(sᵀλ/m_i)` and `τ̄₂ = sᵀλ/‖R⁰‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralityConstants {
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
}

impl CentralityConstants {
    /// An agent with zero initial residual gets `τ̄₂ = 1`, which keeps its second
    /// neighbourhood condition meaningful without dividing by zero.
    pub fn from_start(problem: &CoupledProblem, z: &Iterate, bundles: &[ResidualBundle]) -> Self {
        let (tau1, tau2) = problem
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let prod = z.s[i].component_mul(&z.lambda[i]);
                let gap = bundles[i].eta_hat;
                let t1 = if a.n_ineq() == 0 || gap <= 0.0 { 1.0 } else { prod.min() / (gap / a.n_ineq() as f64) };
                let r = bundles[i].residual_norm();
                let t2 = if r > 0.0 { gap / r } else { 1.0 };
                (t1, t2)
            })
            .unzip();
        Self { tau1, tau2 }
    }
}

/// Neighbourhood factor of outer step `l`: non-increasing, never below 1/2.
pub fn gamma_at(params: &InexactParams, l: usize) -> f64 {
    0.5 + (params.gamma0 - 0.5) * params.gamma_decay.powi(l.min(i32::MAX as usize) as i32)
}

/// Forcing quantities `(σ, η̂, η̄)` of one outer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forcing {
    pub sigma: f64,
    pub eta_hat: f64,
    pub eta_bar: f64,
}

/// Local forcing choice of one agent: start from `η̂ = 1/2`, set
/// `σ = c·η̂ + ε_σ + margin` with `c = τ̄₂ γ gap_i / min_j gap_j`, and halve `η̂` until
/// `σ + η̂ < η_max`.
pub fn local_forcing(tau2: f64, gamma: f64, gap: f64, min_gap: f64, params: &InexactParams) -> Result<(f64, f64)> {
    let c = if min_gap > 0.0 { tau2 * gamma * gap / min_gap } else { f64::INFINITY };
    let mut eta = 0.5;
    for _ in 0..=MAX_FORCING_HALVINGS {
        let sigma = c * eta + params.eps_sigma + SIGMA_MARGIN;
        if sigma + eta < params.eta_max {
            return Ok((sigma, eta));
        }
        eta *= 0.5;
    }
    Err(SolverError::Stall(format!("no forcing pair below η_max (c = {c:e})")))
}

/// Combines per-agent choices: `η̂ = min`, `σ = max`, `η̄ = σ + η̂`.
pub fn combine_forcing(net: &mut crate::netsim::Network, local: &[(f64, f64)]) -> Forcing {
    let sigmas: Vec<f64> = local.iter().map(|p| p.0).collect();
    let etas: Vec<f64> = local.iter().map(|p| p.1).collect();
    let sigma = net.global_max(&sigmas);
    let eta_hat = net.global_min(&etas);
    Forcing { sigma, eta_hat, eta_bar: sigma + eta_hat }
}

/// Inner tolerances guaranteeing `‖r̂‖ ≤ η̂ Σ gap_i / m` at ADMM exit:
/// `ε_pri^i = (N/2)(η̂ gap_i/m)²`, `ε_dual^i = (N/2)(η̂ gap_i/(ρ m))²`.
pub fn admm_thresholds(gaps: &[f64], eta_hat: f64, m_total: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
    let half_n = gaps.len() as f64 / 2.0;
    let m = m_total.max(1) as f64;
    gaps.iter()
        .map(|&g| {
            let t = eta_hat * g / m;
            (half_n * t * t, half_n * (t / rho) * (t / rho))
        })
        .unzip()
}

/// Neighbourhood functions `(f₁, f₂)` of one agent at a trial point; `−∞` outside the
/// positive orthant.
pub fn neighbourhood(
    sub: &AgentSubproblem,
    pt: &AgentPoint,
    tau1: f64,
    tau2: f64,
    gamma: f64,
) -> Result<(f64, f64)> {
    if pt.s.iter().chain(pt.lambda.iter()).any(|&e| e <= 0.0) {
        return Ok((f64::NEG_INFINITY, f64::NEG_INFINITY));
    }
    let b = pt.residuals(sub)?;
    let m = sub.n_ineq().max(1) as f64;
    let prod = pt.s.component_mul(&pt.lambda);
    let f1 = if sub.n_ineq() == 0 { 0.0 } else { prod.min() - tau1 * gamma * b.eta_hat / m };
    let f2 = b.eta_hat - tau2 * gamma * b.residual_norm();
    Ok((f1, f2))
}

fn inside(sub: &AgentSubproblem, pt: &AgentPoint, d: &AgentPoint, a: f64, t1: f64, t2: f64, g: f64) -> Result<bool> {
    let (f1, f2) = neighbourhood(sub, &pt.step(d, a), t1, t2, g)?;
    Ok(f1 >= 0.0 && f2 >= 0.0)
}

/// Largest step in `(0, 1]` found by a uniform scan and bisection such that the trial
/// point stays in the neighbourhood.
pub fn alpha_bound(sub: &AgentSubproblem, pt: &AgentPoint, d: &AgentPoint, tau1: f64, tau2: f64, gamma: f64) -> Result<f64> {
    let (f1, f2) = neighbourhood(sub, pt, tau1, tau2, gamma)?;
    if f1 < -1e-10 || f2 < -1e-10 {
        log::warn!("agent {}: current point outside the neighbourhood (f₁ = {f1:e}, f₂ = {f2:e})", sub.index);
    }
    let mut lo = 0.0;
    let mut hi = None;
    for k in 1..=GRID {
        let a = k as f64 / GRID as f64;
        if inside(sub, pt, d, a, tau1, tau2, gamma)? {
            lo = a;
        } else {
            hi = Some(a);
            break;
        }
    }
    let Some(mut hi) = hi else { return Ok(1.0) };
    for _ in 0..BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if inside(sub, pt, d, mid, tau1, tau2, gamma)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= 0.0 {
        return Err(SolverError::Stall(format!("agent {}: empty neighbourhood step", sub.index)));
    }
    Ok(lo)
}

/// Merit test `‖Hⁱ(α)‖ ≤ (1 − β(1 − η))‖Hⁱ(0)‖` with `η = 1 − α(1 − η̄)`.
pub fn merit_decrease(sub: &AgentSubproblem, pt: &AgentPoint, d: &AgentPoint, alpha: f64, eta_bar: f64, beta: f64, h0: f64) -> Result<bool> {
    let trial = pt.step(d, alpha);
    if trial.s.iter().chain(trial.lambda.iter()).any(|&e| e <= 0.0) {
        return Ok(false);
    }
    let eta = 1.0 - alpha * (1.0 - eta_bar);
    Ok(trial.residuals(sub)?.merit_sq.sqrt() <= (1.0 - beta * (1.0 - eta)) * h0)
}

/// Contracts `α ← θα` from `alpha0` until the merit test passes.
pub fn line_search(sub: &AgentSubproblem, pt: &AgentPoint, d: &AgentPoint, alpha0: f64, eta_bar: f64, params: &InexactParams) -> Result<f64> {
    let h0 = pt.residuals(sub)?.merit_sq.sqrt();
    let mut alpha = alpha0;
    for _ in 0..MAX_CONTRACTIONS {
        if merit_decrease(sub, pt, d, alpha, eta_bar, params.beta, h0)? {
            return Ok(alpha);
        }
        alpha *= params.theta;
    }
    Err(SolverError::Stall(format!("agent {}: merit line search", sub.index)))
}

/// Runs the inexact distributed interior-point method from `init`.
pub fn solve(problem: &CoupledProblem, init: &Iterate, params: &InexactParams) -> Result<SolveReport> {
    params.validate()?;
    let tol = StopTolerances::resolve(problem, params.eps, params.eps_feas);
    let n_agents = problem.num_agents();
    let mut run = OuterRun::new(problem, Method::Inexact, init)?;
    let start = all_residuals(problem, &run.z)?;
    let consts = CentralityConstants::from_start(problem, &run.z, &start);
    let mut forcing_rows = Vec::new();
    let mut warm: Option<DirectionState> = None;
    let (mut mu_prev, mut alpha_prev, mut inner_prev) = (0.0, 0.0, 0);

    let termination = loop {
        let bundles = all_residuals(problem, &run.z)?;
        run.record(&bundles, mu_prev, alpha_prev, inner_prev);
        let limit = tol.eps * tol.eps / n_agents as f64;
        let done: Vec<bool> = bundles.iter().map(|b| b.merit_sq <= limit).collect();
        if run.net.flag_consensus(&done) {
            break Termination::Converged;
        }
        if run.trace.len() > params.max_outer {
            break Termination::MaxIterations;
        }
        match inexact_step(&mut run, &bundles, &consts, params, warm.take()) {
            Ok((row, alpha, inner, state)) => {
                mu_prev = row.mu;
                alpha_prev = alpha;
                inner_prev = inner;
                forcing_rows.push(row);
                if params.warm_start {
                    warm = Some(state);
                }
            }
            Err(e) => break classify(e)?,
        }
    };
    let mut report = run.finish(termination);
    report.forcing = forcing_rows;
    Ok(report)
}

fn inexact_step(
    run: &mut OuterRun,
    bundles: &[ResidualBundle],
    consts: &CentralityConstants,
    params: &InexactParams,
    warm: Option<DirectionState>,
) -> Result<(ForcingRow, f64, usize, DirectionState)> {
    let problem = run.problem;
    let l = run.trace.len() - 1;
    let n_agents = problem.num_agents();
    let m_total = problem.total_ineq();
    let gamma = gamma_at(params, l);

    let gaps: Vec<f64> = bundles.iter().map(|b| b.eta_hat).collect();
    let min_gap = run.net.global_min(&gaps);
    let local: Vec<(f64, f64)> = (0..n_agents)
        .map(|i| local_forcing(consts.tau2[i], gamma, gaps[i], min_gap, params))
        .collect::<Result<_>>()?;
    let forcing = combine_forcing(&mut run.net, &local);
    let mu = forcing.sigma * min_gap / m_total.max(1) as f64;

    let (eps_pri, eps_dual) = admm_thresholds(&gaps, forcing.eta_hat, m_total, params.rho);
    let settings = AdmmSettings {
        rho: params.rho,
        alpha_or: params.alpha_or,
        max_inner: params.max_inner,
        eps_pri: eps_pri.clone(),
        eps_dual: eps_dual.clone(),
    };
    let system = OuterSystem::build(problem, &run.z, mu, params.rho, l as u64)?;
    let mut last_dx_prev = DVector::zeros(problem.n);
    let mut rows = Vec::new();
    let outcome = {
        let record = params.record_inner;
        let mut obs = |s: &admm::InnerSnapshot| {
            last_dx_prev.clone_from(s.dx_prev);
            if record {
                rows.push(inner_row(l, s));
            }
        };
        admm::run(problem, &run.z, &system, &settings, warm, &mut run.net, Some(&mut obs))?
    };
    run.inner.extend(rows);
    if outcome.exhausted {
        run.exhaustions += 1;
        log::debug!("outer {l}: ADMM hit max_inner = {}", settings.max_inner);
    }
    run.total_inner += outcome.inner_iters;
    let r_hat = admm::inner_residual_norm_sq(problem, &system, &outcome.state.dw, &last_dx_prev, &outcome.state.dx).sqrt();
    let row = ForcingRow {
        l,
        sigma: forcing.sigma,
        eta_hat: forcing.eta_hat,
        eta_bar: forcing.eta_bar,
        mu,
        eps_pri_max: eps_pri.iter().copied().fold(0.0, f64::max),
        eps_dual_max: eps_dual.iter().copied().fold(0.0, f64::max),
        r_hat,
        r_hat_bound: forcing.eta_hat * gaps.iter().sum::<f64>() / m_total.max(1) as f64,
    };
    let dir = outcome.direction;
    check_finite(&dir)?;

    let points: Vec<(AgentPoint, AgentPoint)> =
        (0..n_agents).map(|i| (run.z.agent(problem, i), dir.agent(problem, i))).collect();
    let local_alpha: Vec<f64> = (0..n_agents)
        .into_par_iter()
        .map(|i| {
            let sub = &problem.agents[i];
            let (pt, d) = &points[i];
            let bound = alpha_bound(sub, pt, d, consts.tau1[i], consts.tau2[i], gamma)?;
            line_search(sub, pt, d, bound, forcing.eta_bar, params)
        })
        .collect::<Result<_>>()?;
    let h0: Vec<f64> = bundles.iter().map(|b| b.merit_sq.sqrt()).collect();
    let alpha = run.common_step(&local_alpha, params.theta, |i, a| {
        let sub = &problem.agents[i];
        let (pt, d) = &points[i];
        Ok(inside(sub, pt, d, a, consts.tau1[i], consts.tau2[i], gamma)?
            && merit_decrease(sub, pt, d, a, forcing.eta_bar, params.beta, h0[i])?)
    })?;

    let next = run.z.step(&dir, alpha);
    if params.keep_history {
        run.history.push(OuterRecord {
            iterate: run.z.clone(),
            direction: dir,
            mu,
            alpha,
            inner_iters: outcome.inner_iters,
            exhausted: outcome.exhausted,
            eta_bar: Some(forcing.eta_bar),
            inner_state: Some(outcome.state.clone()),
        });
    }
    run.z = next;
    Ok((row, alpha, outcome.inner_iters, outcome.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{AgentGraph, Network};
    use crate::problem::{generate, ProblemGenConfig};

    #[test]
    fn forcing_example_values() {
        // c = 0.2: σ = 0.2·0.5 + 0.1 + 0.01 = 0.21, σ + η̂ = 0.71 < 0.9.
        let p = InexactParams::default();
        let (s, e) = local_forcing(0.2 / 0.9, 0.9, 1.0, 1.0, &p).unwrap();
        assert!((s - 0.21).abs() < 1e-15 && e == 0.5);
        // c = 0.4: σ = 0.31, σ + η̂ = 0.81, still admissible without halving.
        let (s, e) = local_forcing(0.4 / 0.9, 0.9, 1.0, 1.0, &p).unwrap();
        assert!((s - 0.31).abs() < 1e-15 && e == 0.5);
        // c = 1: 1.11 + 0.5 ≥ 0.9 → η̂ = 0.25, σ = 0.36, sum 0.61.
        let (s, e) = local_forcing(1.0 / 0.9, 0.9, 1.0, 1.0, &p).unwrap();
        assert_eq!(e, 0.25);
        assert!((s - 0.36).abs() < 1e-15);
    }

    #[test]
    fn combine_takes_min_eta_max_sigma() {
        let mut net = Network::new(AgentGraph::from_edges(3, &[(0, 1), (1, 2)]));
        let f = combine_forcing(&mut net, &[(0.2, 0.5), (0.4, 0.25), (0.15, 0.125)]);
        assert_eq!((f.sigma, f.eta_hat), (0.4, 0.125));
        assert_eq!(f.eta_bar, 0.525);
    }

    #[test]
    fn thresholds_bound_the_inner_residual() {
        let gaps = [3.0, 1.0, 5.0];
        let (pri, dual) = admm_thresholds(&gaps, 0.25, 6, 0.5);
        let n = gaps.len() as f64;
        // Worst-case ‖r̂‖² permitted by the per-agent stop test.
        let worst: f64 = (0..3).map(|i| 0.25 * dual[i] / n + pri[i] / n).sum();
        let bound = 0.25 * gaps.iter().sum::<f64>() / 6.0;
        assert!(worst.sqrt() <= bound * (1.0 + 1e-12));
        assert_eq!(pri[0], 1.5 * (0.25 * 3.0 / 6.0f64).powi(2));
    }

    #[test]
    fn starting_point_is_inside_neighbourhood() {
        let problem = generate(&ProblemGenConfig::desk(5)).unwrap();
        let z = Iterate::initial(&problem, 5);
        let b = all_residuals(&problem, &z).unwrap();
        let c = CentralityConstants::from_start(&problem, &z, &b);
        for i in 0..problem.num_agents() {
            let (f1, f2) = neighbourhood(&problem.agents[i], &z.agent(&problem, i), c.tau1[i], c.tau2[i], 0.9).unwrap();
            assert!(f1 >= 0.0 && f2 >= 0.0);
        }
    }

    #[test]
    fn desk_problem_converges_with_forcing_bound() {
        let problem = generate(&ProblemGenConfig::desk(6)).unwrap();
        let init = Iterate::initial(&problem, 6);
        let rep = solve(&problem, &init, &InexactParams::default()).unwrap();
        assert!(rep.termination.is_converged(), "{:?}", rep.termination);
        let oracle = crate::baseline::reference_optimum(&problem).unwrap();
        let rel = (rep.final_objective() - oracle.objective).abs() / oracle.objective.abs().max(1.0);
        assert!(rel <= 1e-5, "relative error {rel:e}");
        for f in &rep.forcing {
            assert!(f.eta_bar < 0.9);
            assert!(f.r_hat <= f.r_hat_bound * (1.0 + 1e-9), "{f:?}");
        }
    }
}
