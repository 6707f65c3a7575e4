//! ADMM computation of the coupled primal-dual direction.
//!
//! The direction QP in `(ΔW, Δx)` splits into a per-agent proximal step on `Δw_i`, an
//! owner-average for `Δx` and additive scaled-dual updates. Each agent factors
//! `K_i = H_pd + ρ(I + ĀᵀĀ)` once per outer iteration and reuses it for every inner sweep.
//!
//! Duals are carried scaled (`Δv̄ = Δv/ρ`) and rescaled only when the direction is
//! emitted.

use nalgebra::linalg::Cholesky;
use nalgebra::{DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Result, SolverError};
use crate::kkt::{all_residuals, hpd, r_vec, recover_sl_directions, Direction, Iterate, ResidualBundle};
use crate::netsim::Network;
use crate::problem::{lift, AgentSubproblem, CoupledProblem};

/// Cholesky factor of `K_i`, tagged with the outer iteration and `ρ` it was built for.
#[derive(Debug, Clone)]
pub struct AgentFactorization {
    pub agent: usize,
    pub rho: f64,
    pub tag: u64,
    chol: Cholesky<f64, Dyn>,
}

impl AgentFactorization {
    /// Factors `hpd + ρ(I + A_eqᵀA_eq)`. A failed factorization is retried once with a
    /// `1e-12·trace/dim` diagonal shift.
    pub fn new(agent: usize, sub: &AgentSubproblem, hpd: &DMatrix<f64>, rho: f64, tag: u64) -> Result<Self> {
        let d = sub.dim();
        let k = hpd + (DMatrix::identity(d, d) + sub.a_eq.tr_mul(&sub.a_eq)) * rho;
        let chol = match Cholesky::new(k.clone()) {
            Some(c) => c,
            None => {
                let jitter = 1e-12 * k.trace() / d as f64;
                Cholesky::new(k + DMatrix::identity(d, d) * jitter).ok_or_else(|| {
                    SolverError::Factorization { agent, reason: "K is not positive definite".into() }
                })?
            }
        };
        Ok(Self { agent, rho, tag, chol })
    }

    /// `K⁻¹ b`, refusing to run against a different outer iterate.
    pub fn solve(&self, b: &DVector<f64>, tag: u64) -> Result<DVector<f64>> {
        if tag != self.tag {
            return Err(SolverError::StaleFactorization { built: self.tag, used: tag });
        }
        Ok(self.chol.solve(b))
    }
}

/// Everything an agent needs for one outer iteration's inner loop.
#[derive(Debug, Clone)]
pub struct AgentSystem {
    pub hpd: DMatrix<f64>,
    pub r: DVector<f64>,
    pub bundle: ResidualBundle,
    pub fact: AgentFactorization,
    /// `v_c` at the outer iterate (unscaled).
    pub v_c: DVector<f64>,
}

/// Per-outer-iteration setup: `H_pd`, `r` and one factorization per agent.
#[derive(Debug, Clone)]
pub struct OuterSystem {
    pub tag: u64,
    pub rho: f64,
    pub mu: f64,
    pub agents: Vec<AgentSystem>,
}

impl OuterSystem {
    pub fn build(problem: &CoupledProblem, z: &Iterate, mu: f64, rho: f64, tag: u64) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(SolverError::Config(format!("ρ must be positive, got {rho}")));
        }
        let bundles = all_residuals(problem, z)?;
        let agents = bundles
            .into_par_iter()
            .enumerate()
            .map(|(i, bundle)| {
                let a = &problem.agents[i];
                let h = hpd(a, &z.s[i], &z.lambda[i])?;
                let r = r_vec(a, &bundle, &z.s[i], &z.lambda[i], mu)?;
                let fact = AgentFactorization::new(i, a, &h, rho, tag)?;
                Ok(AgentSystem { hpd: h, r, bundle, fact, v_c: z.v_c[i].clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tag, rho, mu, agents })
    }

    pub fn factorizations(&self) -> usize {
        self.agents.len()
    }
}

/// Inner ADMM state, reusable as a warm start for the next outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionState {
    pub dw: Vec<DVector<f64>>,
    pub dx: DVector<f64>,
    /// `Δv̄ = Δv/ρ`.
    pub dvbar: Vec<DVector<f64>>,
    /// `Δv̄_c = Δv_c/ρ`.
    pub dvbar_c: Vec<DVector<f64>>,
    /// Inner iterations performed by the run that produced this state.
    pub k: usize,
    /// Last per-agent `‖Δx_J^{k+1} − Δx_J^k‖²`.
    pub dual_res: Vec<f64>,
    /// Last per-agent `(‖Δw − Δx_J + r_c‖², ‖ĀΔw + r_p2‖²)`.
    pub primal_res: Vec<(f64, f64)>,
}

impl DirectionState {
    /// Zero state: `ΔW = 0`, `Δx = 0`, zero duals.
    pub fn cold(problem: &CoupledProblem) -> Self {
        Self {
            dw: problem.agents.iter().map(|a| DVector::zeros(a.dim())).collect(),
            dx: DVector::zeros(problem.n),
            dvbar: problem.agents.iter().map(|a| DVector::zeros(a.n_eq())).collect(),
            dvbar_c: problem.agents.iter().map(|a| DVector::zeros(a.dim())).collect(),
            k: 0,
            dual_res: vec![f64::INFINITY; problem.num_agents()],
            primal_res: vec![(f64::INFINITY, f64::INFINITY); problem.num_agents()],
        }
    }

    /// Seeds the state from a known direction (duals are rescaled by `1/ρ`).
    pub fn from_direction(dir: &Direction, rho: f64) -> Self {
        let n = dir.dw.len();
        Self {
            dw: dir.dw.clone(),
            dx: dir.dx.clone(),
            dvbar: dir.dv.iter().map(|v| v / rho).collect(),
            dvbar_c: dir.dv_c.iter().map(|v| v / rho).collect(),
            k: 0,
            dual_res: vec![f64::INFINITY; n],
            primal_res: vec![(f64::INFINITY, f64::INFINITY); n],
        }
    }
}

/// Settings of one ADMM run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmSettings {
    pub rho: f64,
    /// Over-relaxation factor in `[1, 2)`.
    pub alpha_or: f64,
    pub max_inner: usize,
    /// Per-agent primal tolerance `ε_pri^i`; each primal block must fall below `ε_pri^i/(2N)`.
    pub eps_pri: Vec<f64>,
    /// Per-agent dual tolerance `ε_dual^i`; `‖Δx_J^{k+1} − Δx_J^k‖² ≤ ε_dual^i/N`.
    pub eps_dual: Vec<f64>,
}

impl AdmmSettings {
    pub fn uniform(n_agents: usize, rho: f64, alpha_or: f64, eps_pri: f64, eps_dual: f64, max_inner: usize) -> Self {
        Self {
            rho,
            alpha_or,
            max_inner,
            eps_pri: vec![eps_pri; n_agents],
            eps_dual: vec![eps_dual; n_agents],
        }
    }

    fn validate(&self, n_agents: usize) -> Result<()> {
        if !(self.rho > 0.0) {
            return Err(SolverError::Config("ρ must be positive".into()));
        }
        if !(1.0..2.0).contains(&self.alpha_or) {
            return Err(SolverError::Config("over-relaxation factor must lie in [1, 2)".into()));
        }
        if self.eps_pri.len() != n_agents || self.eps_dual.len() != n_agents {
            return Err(SolverError::Config("one ADMM tolerance per agent is required".into()));
        }
        Ok(())
    }
}

/// Snapshot handed to an observer after each inner iteration.
#[derive(Debug)]
pub struct InnerSnapshot<'a> {
    /// 1-based index of the completed iteration.
    pub k: usize,
    pub dw: &'a [DVector<f64>],
    pub dx_prev: &'a DVector<f64>,
    pub dx: &'a DVector<f64>,
    pub dvbar: &'a [DVector<f64>],
    pub dvbar_c: &'a [DVector<f64>],
    pub dual_res: &'a [f64],
    pub primal_res: &'a [(f64, f64)],
}

/// Result of one ADMM direction computation.
#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub direction: Direction,
    pub state: DirectionState,
    pub inner_iters: usize,
    /// Set when `max_inner` ran out before the stop test passed.
    pub exhausted: bool,
    pub factorizations: usize,
}

/// Proximal step for one agent:
/// `Δw = −K⁻¹[r + ρ(r_c + Δv̄_c − Δx_J) + ρĀᵀ(r_p2 + Δv̄)]`.
#[allow(clippy::too_many_arguments)]
pub fn w_step(
    fact: &AgentFactorization,
    tag: u64,
    a_eq: &DMatrix<f64>,
    r: &DVector<f64>,
    r_c: &DVector<f64>,
    r_p2: &DVector<f64>,
    dvbar_c: &DVector<f64>,
    dvbar: &DVector<f64>,
    dx_j: &DVector<f64>,
) -> Result<DVector<f64>> {
    let rho = fact.rho;
    let bracket = w_bracket(a_eq, r, r_c, r_p2, dvbar_c, dvbar, dx_j, rho);
    Ok(-fact.solve(&bracket, tag)?)
}

#[allow(clippy::too_many_arguments)]
fn w_bracket(
    a_eq: &DMatrix<f64>,
    r: &DVector<f64>,
    r_c: &DVector<f64>,
    r_p2: &DVector<f64>,
    dvbar_c: &DVector<f64>,
    dvbar: &DVector<f64>,
    dx_j: &DVector<f64>,
    rho: f64,
) -> DVector<f64> {
    r + (r_c + dvbar_c - dx_j) * rho + a_eq.tr_mul(&(r_p2 + dvbar)) * rho
}

/// Relaxed consistency quantity `α Δw + (1 − α)(Δx_J^k − r_c)`; equals `Δw` when `α = 1`.
pub fn relaxed_consistency(dw: &DVector<f64>, dx_j_prev: &DVector<f64>, r_c: &DVector<f64>, alpha_or: f64) -> DVector<f64> {
    if alpha_or == 1.0 {
        return dw.clone();
    }
    dw * alpha_or + (dx_j_prev - r_c) * (1.0 - alpha_or)
}

/// `Δx_j = (1/|I_j|) Σ_{q∈I_j} [relaxed^q + Δv̄_c^q + v_c^q/ρ + r_c^q]_j`, computed through a
/// neighbour exchange.
pub fn x_step(
    net: &mut Network,
    relaxed: &[DVector<f64>],
    dvbar_c: &[DVector<f64>],
    v_c: &[&DVector<f64>],
    r_c: &[&DVector<f64>],
    rho: f64,
    n: usize,
) -> DVector<f64> {
    let brackets: Vec<DVector<f64>> = (0..relaxed.len())
        .map(|i| &relaxed[i] + &dvbar_c[i] + v_c[i] / rho + r_c[i])
        .collect();
    let local = net.exchange_shared(&brackets);
    let mut dx = DVector::zeros(n);
    for (set, vals) in net.graph.index_sets.iter().zip(&local) {
        for (l, &j) in set.iter().enumerate() {
            dx[j] = vals[l];
        }
    }
    dx
}

/// Scaled dual updates:
/// `Δv̄ += α(ĀΔw + r_p2)` and `Δv̄_c += relaxed − Δx_J^{k+1} + r_c`.
#[allow(clippy::too_many_arguments)]
pub fn dual_step(
    dvbar: &DVector<f64>,
    dvbar_c: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    dw: &DVector<f64>,
    relaxed: &DVector<f64>,
    dx_j: &DVector<f64>,
    r_p2: &DVector<f64>,
    r_c: &DVector<f64>,
    alpha_or: f64,
) -> (DVector<f64>, DVector<f64>) {
    let eq = (a_eq * dw + r_p2) * alpha_or;
    (dvbar + eq, dvbar_c + relaxed - dx_j + r_c)
}

/// Runs the inner ADMM loop to the per-agent stop test and emits the direction.
pub fn run(
    problem: &CoupledProblem,
    z: &Iterate,
    system: &OuterSystem,
    settings: &AdmmSettings,
    warm: Option<DirectionState>,
    net: &mut Network,
    mut observer: Option<&mut dyn FnMut(&InnerSnapshot)>,
) -> Result<AdmmOutcome> {
    let n_agents = problem.num_agents();
    settings.validate(n_agents)?;
    if settings.rho != system.rho {
        return Err(SolverError::Config(format!(
            "ADMM ρ = {} but the factorizations were built with ρ = {}",
            settings.rho, system.rho
        )));
    }
    let rho = settings.rho;
    let alpha = settings.alpha_or;
    let nf = n_agents as f64;
    let tag = system.tag;

    let mut st = warm.unwrap_or_else(|| DirectionState::cold(problem));
    let r_c: Vec<&DVector<f64>> = system.agents.iter().map(|a| &a.bundle.r_c).collect();
    let v_c: Vec<&DVector<f64>> = system.agents.iter().map(|a| &a.v_c).collect();

    let mut k = 0;
    let mut exhausted = true;
    while k < settings.max_inner {
        let dx_prev = st.dx.clone();
        let dx_prev_local: Vec<DVector<f64>> =
            problem.agents.iter().map(|a| lift(&dx_prev, &a.indices)).collect();

        let dw: Vec<DVector<f64>> = (0..n_agents)
            .into_par_iter()
            .map(|i| {
                let sys = &system.agents[i];
                w_step(
                    &sys.fact,
                    tag,
                    &problem.agents[i].a_eq,
                    &sys.r,
                    &sys.bundle.r_c,
                    &sys.bundle.r_primal2,
                    &st.dvbar_c[i],
                    &st.dvbar[i],
                    &dx_prev_local[i],
                )
            })
            .collect::<Result<_>>()?;

        let relaxed: Vec<DVector<f64>> = (0..n_agents)
            .map(|i| relaxed_consistency(&dw[i], &dx_prev_local[i], r_c[i], alpha))
            .collect();
        let dx = x_step(net, &relaxed, &st.dvbar_c, &v_c, &r_c, rho, problem.n);

        let updates: Vec<_> = (0..n_agents)
            .into_par_iter()
            .map(|i| {
                let a = &problem.agents[i];
                let sys = &system.agents[i];
                let dx_j = lift(&dx, &a.indices);
                let (vb, vbc) = dual_step(
                    &st.dvbar[i],
                    &st.dvbar_c[i],
                    &a.a_eq,
                    &dw[i],
                    &relaxed[i],
                    &dx_j,
                    &sys.bundle.r_primal2,
                    &sys.bundle.r_c,
                    alpha,
                );
                let dual = (&dx_j - &dx_prev_local[i]).norm_squared();
                let pri_c = (&dw[i] - &dx_j + &sys.bundle.r_c).norm_squared();
                let pri_eq = (&a.a_eq * &dw[i] + &sys.bundle.r_primal2).norm_squared();
                (vb, vbc, dual, (pri_c, pri_eq))
            })
            .collect();

        let mut flags = Vec::with_capacity(n_agents);
        for (i, (vb, vbc, dual, pri)) in updates.into_iter().enumerate() {
            st.dvbar[i] = vb;
            st.dvbar_c[i] = vbc;
            st.dual_res[i] = dual;
            st.primal_res[i] = pri;
            flags.push(
                dual <= settings.eps_dual[i] / nf
                    && pri.0 <= settings.eps_pri[i] / (2.0 * nf)
                    && pri.1 <= settings.eps_pri[i] / (2.0 * nf),
            );
        }
        st.dw = dw;
        st.dx = dx;
        k += 1;

        if st.dx.iter().any(|v| !v.is_finite()) || st.dw.iter().any(|v| v.iter().any(|e| !e.is_finite())) {
            return Err(SolverError::NonFinite(format!("ADMM iterate at inner step {k}")));
        }
        if let Some(obs) = observer.as_deref_mut() {
            obs(&InnerSnapshot {
                k,
                dw: &st.dw,
                dx_prev: &dx_prev,
                dx: &st.dx,
                dvbar: &st.dvbar,
                dvbar_c: &st.dvbar_c,
                dual_res: &st.dual_res,
                primal_res: &st.primal_res,
            });
        }
        if net.flag_consensus(&flags) {
            exhausted = false;
            break;
        }
    }
    st.k = k;

    let direction = emit_direction(problem, z, system, &st)?;
    Ok(AdmmOutcome { direction, state: st, inner_iters: k, exhausted, factorizations: system.factorizations() })
}

/// Rescales the duals and recovers `(Δs, Δλ)`.
pub fn emit_direction(
    problem: &CoupledProblem,
    z: &Iterate,
    system: &OuterSystem,
    st: &DirectionState,
) -> Result<Direction> {
    let rho = system.rho;
    let (ds, dlambda): (Vec<_>, Vec<_>) = (0..problem.num_agents())
        .map(|i| {
            recover_sl_directions(
                &problem.agents[i],
                &system.agents[i].bundle,
                &z.s[i],
                &z.lambda[i],
                &st.dw[i],
                system.mu,
            )
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Direction {
        dw: st.dw.clone(),
        dx: st.dx.clone(),
        ds,
        dlambda,
        dv: st.dvbar.iter().map(|v| v * rho).collect(),
        dv_c: st.dvbar_c.iter().map(|v| v * rho).collect(),
    })
}

/// `‖r̂‖² = Σ_i [ρ²‖Δx_J^k − Δx_J^{k+1}‖² + ‖Δw − Δx_J^{k+1} + r_c‖² + ‖ĀΔw + r_p2‖²]`.
pub fn inner_residual_norm_sq(
    problem: &CoupledProblem,
    system: &OuterSystem,
    dw: &[DVector<f64>],
    dx_prev: &DVector<f64>,
    dx: &DVector<f64>,
) -> f64 {
    let rho = system.rho;
    problem
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let b = &system.agents[i].bundle;
            let dxj = lift(dx, &a.indices);
            rho * rho * (lift(dx_prev, &a.indices) - &dxj).norm_squared()
                + (&dw[i] - &dxj + &b.r_c).norm_squared()
                + (&a.a_eq * &dw[i] + &b.r_primal2).norm_squared()
        })
        .sum()
}

/// Direction assembled from a snapshot, for residual checks against the full Newton system.
pub fn snapshot_direction(
    problem: &CoupledProblem,
    z: &Iterate,
    system: &OuterSystem,
    snap: &InnerSnapshot,
) -> Result<Direction> {
    let st = DirectionState {
        dw: snap.dw.to_vec(),
        dx: snap.dx.clone(),
        dvbar: snap.dvbar.to_vec(),
        dvbar_c: snap.dvbar_c.to_vec(),
        k: snap.k,
        dual_res: snap.dual_res.to_vec(),
        primal_res: snap.primal_res.to_vec(),
    };
    emit_direction(problem, z, system, &st)
}
