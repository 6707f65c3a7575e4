//! Consensus ADMM on the original problem, with each local update solved by a small dense
//! primal-dual interior-point method. Used as a comparison baseline and, with `ρ = 0` on
//! the centralized problem, as the reference optimum.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};
use crate::ipm_exact::{classify, local_step, OuterRun, StopTolerances};
use crate::kkt::{agent_residuals, all_residuals, hpd, r_vec, recover_sl_directions, AgentPoint, Iterate};
use crate::problem::{lift, AgentSubproblem, CoupledProblem};
use crate::report::{Method, SolveReport, Termination};

/// Settings of the dense single-agent interior-point solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalQpSettings {
    pub sigma: f64,
    pub beta: f64,
    pub gamma_ls: f64,
    /// Target on `‖H‖` (all KKT blocks including complementarity).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LocalQpSettings {
    fn default() -> Self {
        Self { sigma: 0.1, beta: 0.5, gamma_ls: 0.01, tol: 1e-9, max_iter: 200 }
    }
}

/// Primal-dual solution of one inequality-constrained QP.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalQpSolution {
    pub w: DVector<f64>,
    pub s: DVector<f64>,
    pub lambda: DVector<f64>,
    pub v: DVector<f64>,
    pub iterations: usize,
    /// `‖H‖` at exit.
    pub kkt_residual: f64,
}

/// Solves `min wᵀPw + qᵀw + e s.t. A_in w + b_in ≤ 0, A_eq w = b_eq` for one subproblem.
///
/// Residuals are the coupled ones with `x_J = w` and `v_c = 0`, so the Newton step is the
/// condensed system `[H_pd A_eqᵀ; A_eq 0] (Δw, Δv) = −(r, r_p2)` followed by slack and
/// multiplier recovery. The solve fails with [`SolverError::LocalSolve`] if the target is
/// not met within `max_iter` iterations.
pub fn solve_local_qp(sub: &AgentSubproblem, settings: &LocalQpSettings) -> Result<LocalQpSolution> {
    let d = sub.dim();
    let m = sub.n_ineq();
    let p = sub.n_eq();
    let fail = |reason: String| SolverError::LocalSolve { agent: sub.index, reason };

    let w = DVector::zeros(d);
    let s = sub.ineq(&w).map(|g| (-g).max(1.0));
    let mut pt = AgentPoint {
        x_j: w.clone(),
        w,
        s,
        lambda: DVector::repeat(m, 1.0),
        v: DVector::zeros(p),
        v_c: DVector::zeros(d),
    };
    for it in 0..=settings.max_iter {
        let b = pt.residuals(sub)?;
        let merit = b.merit_sq.sqrt();
        if !merit.is_finite() {
            return Err(fail(format!("non-finite residual at iteration {it}")));
        }
        if merit <= settings.tol {
            return Ok(LocalQpSolution {
                w: pt.w,
                s: pt.s,
                lambda: pt.lambda,
                v: pt.v,
                iterations: it,
                kkt_residual: merit,
            });
        }
        if it == settings.max_iter {
            break;
        }
        let mu = if m == 0 { 0.0 } else { settings.sigma * b.eta_hat / m as f64 };
        let h = hpd(sub, &pt.s, &pt.lambda)?;
        let r = r_vec(sub, &b, &pt.s, &pt.lambda, mu)?;
        let mut k = DMatrix::zeros(d + p, d + p);
        k.view_mut((0, 0), (d, d)).copy_from(&h);
        k.view_mut((0, d), (d, p)).copy_from(&sub.a_eq.transpose());
        k.view_mut((d, 0), (p, d)).copy_from(&sub.a_eq);
        let mut rhs = DVector::zeros(d + p);
        rhs.rows_mut(0, d).copy_from(&(-r));
        rhs.rows_mut(d, p).copy_from(&(-&b.r_primal2));
        let sol = k.lu().solve(&rhs).ok_or_else(|| fail("singular Newton system".into()))?;
        let dw = sol.rows(0, d).into_owned();
        let (ds, dl) = recover_sl_directions(sub, &b, &pt.s, &pt.lambda, &dw, mu)?;
        let dir = AgentPoint {
            x_j: dw.clone(),
            w: dw,
            s: ds,
            lambda: dl,
            v: sol.rows(d, p).into_owned(),
            v_c: DVector::zeros(d),
        };
        let alpha = local_step(sub, &pt, &dir, settings.beta, settings.gamma_ls)
            .map_err(|e| fail(format!("line search at iteration {it}: {e}")))?;
        pt = pt.step(&dir, alpha);
    }
    let merit = pt.residuals(sub)?.merit_sq.sqrt();
    Err(fail(format!("‖H‖ = {merit:e} after {} iterations", settings.max_iter)))
}

/// Local consensus-ADMM update: `min f̄(w) + ρ/2‖w − x_J + v̄_c‖²` over the local
/// constraints, i.e. `P̃ = P + (ρ/2)I` and `q̃ = q − ρ(x_J − v̄_c)`.
pub fn local_qp(
    sub: &AgentSubproblem,
    x_j: &DVector<f64>,
    vbar_c: &DVector<f64>,
    rho: f64,
    settings: &LocalQpSettings,
) -> Result<LocalQpSolution> {
    let shifted = augmented_subproblem(sub, x_j, vbar_c, rho)?;
    solve_local_qp(&shifted, settings)
}

fn augmented_subproblem(
    sub: &AgentSubproblem,
    x_j: &DVector<f64>,
    vbar_c: &DVector<f64>,
    rho: f64,
) -> Result<AgentSubproblem> {
    let d = sub.dim();
    AgentSubproblem::new(
        sub.index,
        &sub.p + DMatrix::identity(d, d) * (rho / 2.0),
        &sub.q - (x_j - vbar_c) * rho,
        sub.e,
        sub.a_in.clone(),
        sub.b_in.clone(),
        sub.a_eq.clone(),
        sub.b_eq.clone(),
        sub.indices.clone(),
    )
}

/// Optimum of the coupled problem from a centralized dense solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

/// Reference optimum: the local interior-point solver applied to the centralized problem
/// with a tolerance relative to the problem scale.
pub fn reference_optimum(problem: &CoupledProblem) -> Result<ReferenceSolution> {
    let central = problem.centralized()?;
    let settings = LocalQpSettings { tol: 1e-4 * crate::problem::tolerance_scale(problem), max_iter: 500, ..Default::default() };
    let sol = solve_local_qp(&central, &settings)?;
    Ok(ReferenceSolution { objective: problem.objective_global(&sol.w), x: sol.w, iterations: sol.iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineParams {
    pub rho: f64,
    pub eps: Option<f64>,
    pub eps_feas: Option<f64>,
    pub max_iter: usize,
    pub local: LocalQpSettings,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self { rho: 0.5, eps: None, eps_feas: None, max_iter: 5000, local: LocalQpSettings::default() }
    }
}

/// Consensus-ADMM state: local primal copies, global vector and scaled consensus duals.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineState {
    pub w: Vec<DVector<f64>>,
    pub x: DVector<f64>,
    pub vbar_c: Vec<DVector<f64>>,
    pub rho: f64,
    pub k: usize,
}

/// Runs consensus ADMM from `init` (its `x` and `v_c/ρ` seed the state) until the shared
/// interior-point stopping test holds on the synthesized iterate.
///
/// Inner iterations per ADMM step count the slowest agent's local interior-point
/// iterations, since the agents solve in parallel.
pub fn solve(problem: &CoupledProblem, init: &Iterate, params: &BaselineParams) -> Result<SolveReport> {
    if !(params.rho > 0.0) {
        return Err(SolverError::Config("baseline ρ must be positive".into()));
    }
    let tol = StopTolerances::resolve(problem, params.eps, params.eps_feas);
    let n_agents = problem.num_agents();
    let mut run = OuterRun::new(problem, Method::Baseline, init)?;
    let mut st = BaselineState {
        w: init.w.clone(),
        x: init.x.clone(),
        vbar_c: init.v_c.iter().map(|v| v / params.rho).collect(),
        rho: params.rho,
        k: 0,
    };

    let bundles = all_residuals(problem, &run.z)?;
    run.record(&bundles, 0.0, 0.0, 0);
    let termination = loop {
        if st.k >= params.max_iter {
            break Termination::MaxIterations;
        }
        match baseline_step(&mut run, &mut st, params) {
            Ok(iters) => {
                let bundles = all_residuals(problem, &run.z)?;
                run.total_inner += iters;
                run.record(&bundles, 0.0, 1.0, iters);
                let done: Vec<bool> = bundles.iter().map(|b| tol.agent_done(b, n_agents)).collect();
                if run.net.flag_consensus(&done) {
                    break Termination::Converged;
                }
            }
            Err(e) => break classify(e)?,
        }
    };
    Ok(run.finish(termination))
}

fn baseline_step(run: &mut OuterRun, st: &mut BaselineState, params: &BaselineParams) -> Result<usize> {
    let problem = run.problem;
    let rho = params.rho;
    let sols: Vec<LocalQpSolution> = (0..problem.num_agents())
        .into_par_iter()
        .map(|i| {
            let a = &problem.agents[i];
            local_qp(a, &lift(&st.x, &a.indices), &st.vbar_c[i], rho, &params.local)
        })
        .collect::<Result<_>>()?;
    let contrib: Vec<DVector<f64>> = sols.iter().zip(&st.vbar_c).map(|(s, v)| &s.w + v).collect();
    let avg = run.net.exchange_shared(&contrib);
    let mut x = DVector::zeros(problem.n);
    for (a, local) in problem.agents.iter().zip(&avg) {
        for (k, &j) in a.indices.iter().enumerate() {
            x[j] = local[k];
        }
    }
    for (i, a) in problem.agents.iter().enumerate() {
        st.vbar_c[i] += &sols[i].w - lift(&x, &a.indices);
    }
    st.w = sols.iter().map(|s| s.w.clone()).collect();
    st.x = x;
    st.k += 1;

    let iters = sols.iter().map(|s| s.iterations).max().unwrap_or(0);
    run.z = Iterate {
        w: st.w.clone(),
        x: st.x.clone(),
        s: sols.iter().map(|s| s.s.clone()).collect(),
        lambda: sols.iter().map(|s| s.lambda.clone()).collect(),
        v: sols.into_iter().map(|s| s.v).collect(),
        v_c: st.vbar_c.iter().map(|v| v * rho).collect(),
    };
    Ok(iters)
}

/// KKT residual norm of a local QP solution, evaluated on the augmented subproblem.
pub fn local_qp_residual(
    sub: &AgentSubproblem,
    x_j: &DVector<f64>,
    vbar_c: &DVector<f64>,
    rho: f64,
    sol: &LocalQpSolution,
) -> Result<f64> {
    let shifted = augmented_subproblem(sub, x_j, vbar_c, rho)?;
    let b = agent_residuals(&shifted, &sol.w, &sol.w, &sol.s, &sol.lambda, &sol.v, &DVector::zeros(sub.dim()))?;
    Ok(b.merit_sq.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{generate, ProblemGenConfig};
    use approx::assert_relative_eq;

    fn unconstrained(d: usize) -> AgentSubproblem {
        let p = DMatrix::from_fn(d, d, |r, c| if r == c { 2.0 } else { 0.3 });
        AgentSubproblem::new(
            0,
            p,
            DVector::from_fn(d, |r, _| r as f64 - 1.0),
            0.0,
            DMatrix::zeros(0, d),
            DVector::zeros(0),
            DMatrix::zeros(0, d),
            DVector::zeros(0),
            (0..d).collect(),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_update_is_closed_form() {
        let sub = unconstrained(3);
        let x_j = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let vbar = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let rho = 0.7;
        let sol = local_qp(&sub, &x_j, &vbar, rho, &LocalQpSettings::default()).unwrap();
        let lhs = sub.hessian() + DMatrix::identity(3, 3) * rho;
        let expect = lhs.lu().solve(&((&x_j - &vbar) * rho - &sub.q)).unwrap();
        assert_relative_eq!(sol.w, expect, epsilon = 1e-10);
    }

    #[test]
    fn inactive_inequalities_match_equality_only_solution() {
        // min w₁² + w₂² s.t. w₁ + w₂ = 2, w₁ ≤ 10: optimum (1, 1), inequality slack.
        let sub = AgentSubproblem::new(
            0,
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            0.0,
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_element(1, -10.0),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 2.0),
            vec![0, 1],
        )
        .unwrap();
        let sol = solve_local_qp(&sub, &LocalQpSettings::default()).unwrap();
        assert_relative_eq!(sol.w, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-9);
        assert!(sol.lambda[0] < 1e-8);
        assert_relative_eq!(sol.v[0], -2.0, epsilon = 1e-8);
    }

    #[test]
    fn active_inequality_is_respected() {
        // min (w − 3)² s.t. w ≤ 1 → w = 1, λ = 4.
        let sub = AgentSubproblem::new(
            0,
            DMatrix::identity(1, 1),
            DVector::from_element(1, -6.0),
            9.0,
            DMatrix::identity(1, 1),
            DVector::from_element(1, -1.0),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
            vec![0],
        )
        .unwrap();
        let sol = solve_local_qp(&sub, &LocalQpSettings::default()).unwrap();
        assert_relative_eq!(sol.w[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(sol.lambda[0], 4.0, epsilon = 1e-7);
        assert!(sol.kkt_residual <= 1e-9);
    }

    #[test]
    fn generated_local_updates_meet_tolerance() {
        let problem = generate(&ProblemGenConfig::desk(3)).unwrap();
        let z = Iterate::initial(&problem, 3);
        for (i, a) in problem.agents.iter().enumerate() {
            let xj = z.x_local(&problem, i);
            let vbar = DVector::from_element(a.dim(), 0.25);
            let sol = local_qp(a, &xj, &vbar, 0.5, &LocalQpSettings::default()).unwrap();
            assert!(local_qp_residual(a, &xj, &vbar, 0.5, &sol).unwrap() <= 1e-9);
            assert!(sol.s.iter().all(|&s| s > 0.0) && sol.lambda.iter().all(|&l| l >= 0.0));
        }
    }

    #[test]
    fn baseline_converges_to_reference() {
        let problem = generate(&ProblemGenConfig::desk(4)).unwrap();
        let init = Iterate::initial(&problem, 4);
        let rep = solve(&problem, &init, &BaselineParams::default()).unwrap();
        assert!(rep.termination.is_converged(), "{:?}", rep.termination);
        let oracle = reference_optimum(&problem).unwrap();
        let rel = (rep.final_objective() - oracle.objective).abs() / oracle.objective.abs().max(1.0);
        assert!(rel <= 1e-4, "relative error {rel:e}");
        assert!(rep.trace.iter().skip(1).all(|r| r.mu == 0.0 && r.alpha == 1.0));
        // Synthesized consistency duals stay balanced across owners.
        assert!(rep.iterate.consistency_dual_drift(&problem) < 1e-8);
    }
}
