//! Primal-dual iterates, per-agent residuals and the closed-form elimination of `Δs`, `Δλ`.
//!
//! Sign conventions follow the compact Newton system `H'(z)Δz = −H(z) + μ(0,…,0,ê)` whose
//! last block row reads `ΛΔs + SΔλ = μê − Λs`. Eliminating `Δs` and `Δλ` from it gives
//!
//! ```text
//! Δs  = −A_in Δw − r_p1
//! Δλ  = S⁻¹(μê − r_cent − Λ Δs)
//! H_pd = 2P + A_inᵀ diag(λ/s) A_in
//! r    = r_dual + A_inᵀ S⁻¹(μê − r_cent + Λ r_p1)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SolverError};
use crate::problem::{lift, scatter_sum, AgentSubproblem, CoupledProblem};

/// Slacks below this are treated as a broken interior invariant rather than clamped.
pub const SLACK_FLOOR: f64 = 1e-14;

/// Size guard for dense oracle assembly.
pub const DENSE_LIMIT: usize = 4000;

/// RNG stream reserved for the initial iterate (agent streams use `1..=N`).
const INIT_STREAM: u64 = u64::MAX;

/// Full primal-dual point `z = (W, x, s, λ, v, v_c)`. `v_c` is stored unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub w: Vec<DVector<f64>>,
    pub x: DVector<f64>,
    pub s: Vec<DVector<f64>>,
    pub lambda: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
    pub v_c: Vec<DVector<f64>>,
}

impl Iterate {
    /// Default starting point: `x ~ U(−10, 10)`, `w_i = x[J_i]`, `λ = v = 10`, `v_c = 0`
    /// and `s = max(1, −(A_in w + b_in))` elementwise.
    pub fn initial(problem: &CoupledProblem, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let x = DVector::from_fn(problem.n, |_, _| rng.random_range(-10.0..10.0));
        Self::from_global(problem, x)
    }

    /// Starting point built around a given global vector.
    pub fn from_global(problem: &CoupledProblem, x: DVector<f64>) -> Self {
        let w: Vec<_> = problem.agents.iter().map(|a| lift(&x, &a.indices)).collect();
        let s = problem
            .agents
            .iter()
            .zip(&w)
            .map(|(a, wi)| a.ineq(wi).map(|g| (-g).max(1.0)))
            .collect();
        let lambda = problem.agents.iter().map(|a| DVector::repeat(a.n_ineq(), 10.0)).collect();
        let v = problem.agents.iter().map(|a| DVector::repeat(a.n_eq(), 10.0)).collect();
        let v_c = problem.agents.iter().map(|a| DVector::zeros(a.dim())).collect();
        Self { w, x, s, lambda, v, v_c }
    }

    /// Structural check against the problem dimensions.
    pub fn check_shapes(&self, problem: &CoupledProblem) -> Result<()> {
        let n = problem.num_agents();
        if [self.w.len(), self.s.len(), self.lambda.len(), self.v.len(), self.v_c.len()]
            .iter()
            .any(|&l| l != n)
            || self.x.len() != problem.n
        {
            return Err(SolverError::Structural("iterate does not match agent count".into()));
        }
        for (i, a) in problem.agents.iter().enumerate() {
            if self.w[i].len() != a.dim()
                || self.v_c[i].len() != a.dim()
                || self.s[i].len() != a.n_ineq()
                || self.lambda[i].len() != a.n_ineq()
                || self.v[i].len() != a.n_eq()
            {
                return Err(SolverError::Structural(format!("agent {i}: iterate block sizes")));
            }
        }
        Ok(())
    }

    pub fn is_strictly_interior(&self) -> bool {
        self.s.iter().chain(&self.lambda).all(|v| v.iter().all(|&e| e > 0.0))
    }

    /// `‖Σ_i E_{J_i}ᵀ v_c^i‖_∞`, which the algorithms keep at zero.
    pub fn consistency_dual_drift(&self, problem: &CoupledProblem) -> f64 {
        scatter_sum(problem, &self.v_c).amax()
    }

    pub fn x_local(&self, problem: &CoupledProblem, i: usize) -> DVector<f64> {
        lift(&self.x, &problem.agents[i].indices)
    }

    /// `z + α Δz`.
    pub fn step(&self, dir: &Direction, alpha: f64) -> Self {
        let axpy = |a: &[DVector<f64>], b: &[DVector<f64>]| -> Vec<DVector<f64>> {
            a.iter().zip(b).map(|(u, d)| u + d * alpha).collect()
        };
        Self {
            w: axpy(&self.w, &dir.dw),
            x: &self.x + &dir.dx * alpha,
            s: axpy(&self.s, &dir.ds),
            lambda: axpy(&self.lambda, &dir.dlambda),
            v: axpy(&self.v, &dir.dv),
            v_c: axpy(&self.v_c, &dir.dv_c),
        }
    }

    pub fn agent(&self, problem: &CoupledProblem, i: usize) -> AgentPoint {
        AgentPoint {
            w: self.w[i].clone(),
            x_j: self.x_local(problem, i),
            s: self.s[i].clone(),
            lambda: self.lambda[i].clone(),
            v: self.v[i].clone(),
            v_c: self.v_c[i].clone(),
        }
    }
}

/// Search direction `Δz` with the same layout as [`Iterate`]; all duals unscaled.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub dw: Vec<DVector<f64>>,
    pub dx: DVector<f64>,
    pub ds: Vec<DVector<f64>>,
    pub dlambda: Vec<DVector<f64>>,
    pub dv: Vec<DVector<f64>>,
    pub dv_c: Vec<DVector<f64>>,
}

impl Direction {
    pub fn zeros(problem: &CoupledProblem) -> Self {
        let per = |f: fn(&AgentSubproblem) -> usize| -> Vec<DVector<f64>> {
            problem.agents.iter().map(|a| DVector::zeros(f(a))).collect()
        };
        Self {
            dw: per(AgentSubproblem::dim),
            dx: DVector::zeros(problem.n),
            ds: per(AgentSubproblem::n_ineq),
            dlambda: per(AgentSubproblem::n_ineq),
            dv: per(AgentSubproblem::n_eq),
            dv_c: per(AgentSubproblem::dim),
        }
    }

    pub fn agent(&self, problem: &CoupledProblem, i: usize) -> AgentPoint {
        AgentPoint {
            w: self.dw[i].clone(),
            x_j: lift(&self.dx, &problem.agents[i].indices),
            s: self.ds[i].clone(),
            lambda: self.dlambda[i].clone(),
            v: self.dv[i].clone(),
            v_c: self.dv_c[i].clone(),
        }
    }

    /// Euclidean norm of the primal-dual blocks `(ΔW, Δx, Δv, Δv_c)` that the coupled
    /// system determines.
    pub fn coupled_norm(&self) -> f64 {
        let sq = |v: &[DVector<f64>]| v.iter().map(|b| b.norm_squared()).sum::<f64>();
        (sq(&self.dw) + self.dx.norm_squared() + sq(&self.dv) + sq(&self.dv_c)).sqrt()
    }

    /// Norm of `self − other` over the coupled blocks.
    pub fn coupled_distance(&self, other: &Direction) -> f64 {
        let sq = |a: &[DVector<f64>], b: &[DVector<f64>]| {
            a.iter().zip(b).map(|(u, v)| (u - v).norm_squared()).sum::<f64>()
        };
        (sq(&self.dw, &other.dw)
            + (&self.dx - &other.dx).norm_squared()
            + sq(&self.dv, &other.dv)
            + sq(&self.dv_c, &other.dv_c))
        .sqrt()
    }
}

/// One agent's slice of an iterate (or of a direction), with `x` already gathered.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPoint {
    pub w: DVector<f64>,
    pub x_j: DVector<f64>,
    pub s: DVector<f64>,
    pub lambda: DVector<f64>,
    pub v: DVector<f64>,
    pub v_c: DVector<f64>,
}

impl AgentPoint {
    pub fn step(&self, d: &AgentPoint, alpha: f64) -> Self {
        Self {
            w: &self.w + &d.w * alpha,
            x_j: &self.x_j + &d.x_j * alpha,
            s: &self.s + &d.s * alpha,
            lambda: &self.lambda + &d.lambda * alpha,
            v: &self.v + &d.v * alpha,
            v_c: &self.v_c + &d.v_c * alpha,
        }
    }

    pub fn residuals(&self, sub: &AgentSubproblem) -> Result<ResidualBundle> {
        agent_residuals(sub, &self.w, &self.x_j, &self.s, &self.lambda, &self.v, &self.v_c)
    }
}

/// Per-agent residual blocks of `Hⁱ(zⁱ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBundle {
    /// `2Pw + q + A_inᵀλ + A_eqᵀv + v_c`.
    pub r_dual: DVector<f64>,
    /// `A_in w + b_in + s`.
    pub r_primal1: DVector<f64>,
    /// `A_eq w − b_eq`.
    pub r_primal2: DVector<f64>,
    /// `w − x[J]`.
    pub r_c: DVector<f64>,
    /// `Λs`.
    pub r_cent: DVector<f64>,
    /// `sᵀλ`.
    pub eta_hat: f64,
    /// `‖Hⁱ‖²`.
    pub merit_sq: f64,
}

impl ResidualBundle {
    /// `‖(r_p1, r_p2, r_c)‖²`.
    pub fn primal_sq(&self) -> f64 {
        self.r_primal1.norm_squared() + self.r_primal2.norm_squared() + self.r_c.norm_squared()
    }

    pub fn dual_sq(&self) -> f64 {
        self.r_dual.norm_squared()
    }

    /// `‖Rⁱ‖`: the merit without the centrality block.
    pub fn residual_norm(&self) -> f64 {
        (self.dual_sq() + self.primal_sq()).sqrt()
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(SolverError::Structural(format!("{what}: length {got}, expected {want}")));
    }
    Ok(())
}

fn check_slack(s: &DVector<f64>) -> Result<()> {
    match s.iter().position(|&e| !(e >= SLACK_FLOOR)) {
        Some(j) => Err(SolverError::Domain(format!("slack {j} is {:e}", s[j]))),
        None => Ok(()),
    }
}

/// Evaluates every residual block of one agent; needs no communication.
pub fn agent_residuals(
    sub: &AgentSubproblem,
    w: &DVector<f64>,
    x_j: &DVector<f64>,
    s: &DVector<f64>,
    lambda: &DVector<f64>,
    v: &DVector<f64>,
    v_c: &DVector<f64>,
) -> Result<ResidualBundle> {
    let (d, m, p) = (sub.dim(), sub.n_ineq(), sub.n_eq());
    check_len("w", w.len(), d)?;
    check_len("x[J]", x_j.len(), d)?;
    check_len("v_c", v_c.len(), d)?;
    check_len("s", s.len(), m)?;
    check_len("λ", lambda.len(), m)?;
    check_len("v", v.len(), p)?;

    let r_dual = sub.gradient(w) + sub.a_in.tr_mul(lambda) + sub.a_eq.tr_mul(v) + v_c;
    let r_primal1 = sub.ineq(w) + s;
    let r_primal2 = &sub.a_eq * w - &sub.b_eq;
    let r_c = w - x_j;
    let r_cent = s.component_mul(lambda);
    let eta_hat = s.dot(lambda);
    let merit_sq = r_dual.norm_squared()
        + r_primal1.norm_squared()
        + r_primal2.norm_squared()
        + r_c.norm_squared()
        + r_cent.norm_squared();
    Ok(ResidualBundle { r_dual, r_primal1, r_primal2, r_c, r_cent, eta_hat, merit_sq })
}

/// Residuals of every agent, evaluated in parallel and returned in agent order.
pub fn all_residuals(problem: &CoupledProblem, z: &Iterate) -> Result<Vec<ResidualBundle>> {
    (0..problem.num_agents())
        .into_par_iter()
        .map(|i| z.agent(problem, i).residuals(&problem.agents[i]))
        .collect()
}

/// Condensed Hessian `2P + A_inᵀ diag(λ/s) A_in`, symmetrized.
pub fn hpd(sub: &AgentSubproblem, s: &DVector<f64>, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_len("s", s.len(), sub.n_ineq())?;
    check_len("λ", lambda.len(), sub.n_ineq())?;
    check_slack(s)?;
    let ratio = lambda.component_div(s);
    let mut scaled = sub.a_in.clone();
    for (r, mut row) in scaled.row_iter_mut().enumerate() {
        row *= ratio[r];
    }
    let h = sub.hessian() + sub.a_in.tr_mul(&scaled);
    Ok((&h + h.transpose()) * 0.5)
}

/// Right-hand side vector `rⁱ = r_dual + A_inᵀ S⁻¹(μê − r_cent + Λ r_p1)`.
pub fn r_vec(
    sub: &AgentSubproblem,
    bundle: &ResidualBundle,
    s: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: f64,
) -> Result<DVector<f64>> {
    check_slack(s)?;
    let inner = (bundle.r_primal1.component_mul(lambda) - &bundle.r_cent)
        .add_scalar(mu)
        .component_div(s);
    Ok(&bundle.r_dual + sub.a_in.tr_mul(&inner))
}

/// Recovers `(Δs, Δλ)` from `Δw` so that the linearized primal-inequality and
/// complementarity rows hold exactly.
pub fn recover_sl_directions(
    sub: &AgentSubproblem,
    bundle: &ResidualBundle,
    s: &DVector<f64>,
    lambda: &DVector<f64>,
    dw: &DVector<f64>,
    mu: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_slack(s)?;
    check_len("Δw", dw.len(), sub.dim())?;
    let ds = -(&sub.a_in * dw) - &bundle.r_primal1;
    let dl = (-&bundle.r_cent - lambda.component_mul(&ds)).add_scalar(mu).component_div(s);
    Ok((ds, dl))
}

pub fn merit_norm_sq(bundles: &[ResidualBundle]) -> f64 {
    bundles.iter().map(|b| b.merit_sq).sum()
}

pub fn surrogate_gap(bundles: &[ResidualBundle]) -> f64 {
    bundles.iter().map(|b| b.eta_hat).sum()
}

/// Column offsets of the unknowns `(ΔW, Δx, Δv, Δv_c)` in the dense coupled system.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledLayout {
    pub w_off: Vec<usize>,
    pub x_off: usize,
    pub v_off: Vec<usize>,
    pub vc_off: Vec<usize>,
    pub size: usize,
}

impl CoupledLayout {
    pub fn new(problem: &CoupledProblem) -> Self {
        let mut off = 0;
        let mut w_off = Vec::new();
        for a in &problem.agents {
            w_off.push(off);
            off += a.dim();
        }
        let x_off = off;
        off += problem.n;
        let mut v_off = Vec::new();
        for a in &problem.agents {
            v_off.push(off);
            off += a.n_eq();
        }
        let mut vc_off = Vec::new();
        for a in &problem.agents {
            vc_off.push(off);
            off += a.dim();
        }
        Self { w_off, x_off, v_off, vc_off, size: off }
    }

    /// Splits a stacked solution into `(ΔW, Δx, Δv, Δv_c)`.
    #[allow(clippy::type_complexity)]
    pub fn split(
        &self,
        problem: &CoupledProblem,
        sol: &DVector<f64>,
    ) -> (Vec<DVector<f64>>, DVector<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let seg = |o: usize, l: usize| DVector::from_column_slice(&sol.as_slice()[o..o + l]);
        let dw = problem.agents.iter().zip(&self.w_off).map(|(a, &o)| seg(o, a.dim())).collect();
        let dx = seg(self.x_off, problem.n);
        let dv = problem.agents.iter().zip(&self.v_off).map(|(a, &o)| seg(o, a.n_eq())).collect();
        let dvc =
            problem.agents.iter().zip(&self.vc_off).map(|(a, &o)| seg(o, a.dim())).collect();
        (dw, dx, dv, dvc)
    }
}

/// Dense symmetric assembly of the coupled direction system in `(ΔW, Δx, Δv, Δv_c)`:
///
/// ```text
/// [ H̄_pd  0    Āᵀ  I  ] [ΔW ]   [ −r      ]
/// [ 0     0    0   −Ēᵀ] [Δx ] = [ Ēᵀv_c   ]
/// [ Ā     0    0   0  ] [Δv ]   [ −r_p2   ]
/// [ I     −Ē   0   0  ] [Δv_c]  [ −r_c    ]
/// ```
///
/// Oracle-only; guarded by [`DENSE_LIMIT`].
pub fn dense_kkt(problem: &CoupledProblem, z: &Iterate, mu: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    z.check_shapes(problem)?;
    let layout = CoupledLayout::new(problem);
    if layout.size > DENSE_LIMIT {
        return Err(SolverError::Structural(format!(
            "dense system of size {} exceeds the oracle limit {DENSE_LIMIT}",
            layout.size
        )));
    }
    let bundles = all_residuals(problem, z)?;
    let mut k = DMatrix::zeros(layout.size, layout.size);
    let mut rhs = DVector::zeros(layout.size);
    for (i, a) in problem.agents.iter().enumerate() {
        let (wo, vo, co) = (layout.w_off[i], layout.v_off[i], layout.vc_off[i]);
        let (d, p) = (a.dim(), a.n_eq());
        let h = hpd(a, &z.s[i], &z.lambda[i])?;
        let r = r_vec(a, &bundles[i], &z.s[i], &z.lambda[i], mu)?;
        k.view_mut((wo, wo), (d, d)).copy_from(&h);
        k.view_mut((wo, vo), (d, p)).copy_from(&a.a_eq.transpose());
        k.view_mut((vo, wo), (p, d)).copy_from(&a.a_eq);
        for (l, &j) in a.indices.iter().enumerate() {
            k[(wo + l, co + l)] = 1.0;
            k[(co + l, wo + l)] = 1.0;
            k[(layout.x_off + j, co + l)] = -1.0;
            k[(co + l, layout.x_off + j)] = -1.0;
            rhs[layout.x_off + j] += z.v_c[i][l];
        }
        rhs.rows_mut(wo, d).copy_from(&(-r));
        rhs.rows_mut(vo, p).copy_from(&(-&bundles[i].r_primal2));
        rhs.rows_mut(co, d).copy_from(&(-&bundles[i].r_c));
    }
    Ok((k, rhs))
}

/// Solves [`dense_kkt`] by LU and completes the direction with the recovered `(Δs, Δλ)`.
pub fn dense_direction(problem: &CoupledProblem, z: &Iterate, mu: f64) -> Result<Direction> {
    let (k, rhs) = dense_kkt(problem, z, mu)?;
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SolverError::SingularSystem("coupled KKT matrix".into()))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::SingularSystem("coupled KKT solve produced non-finite values".into()));
    }
    let layout = CoupledLayout::new(problem);
    let (dw, dx, dv, dv_c) = layout.split(problem, &sol);
    complete_direction(problem, z, mu, dw, dx, dv, dv_c)
}

/// Fills in `(Δs, Δλ)` for a direction given its coupled blocks.
pub fn complete_direction(
    problem: &CoupledProblem,
    z: &Iterate,
    mu: f64,
    dw: Vec<DVector<f64>>,
    dx: DVector<f64>,
    dv: Vec<DVector<f64>>,
    dv_c: Vec<DVector<f64>>,
) -> Result<Direction> {
    let bundles = all_residuals(problem, z)?;
    let (ds, dlambda) = problem
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| recover_sl_directions(a, &bundles[i], &z.s[i], &z.lambda[i], &dw[i], mu))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Direction { dw, dx, ds, dlambda, dv, dv_c })
}

/// Block residual of the full (uneliminated) Newton system `H'Δz + H − μ(0,…,0,ê)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonResidual {
    /// `2PΔw + A_inᵀΔλ + A_eqᵀΔv + Δv_c + r_dual`, per agent.
    pub dual: Vec<DVector<f64>>,
    /// `−Σ E_Jᵀ(v_c + Δv_c)`, the stationarity row in `x`.
    pub consensus: DVector<f64>,
    /// `A_in Δw + Δs + r_p1`, per agent.
    pub primal1: Vec<DVector<f64>>,
    /// `A_eq Δw + r_p2`, per agent.
    pub primal2: Vec<DVector<f64>>,
    /// `Δw − Δx[J] + r_c`, per agent.
    pub consistency: Vec<DVector<f64>>,
    /// `ΛΔs + SΔλ + r_cent − μê`, per agent.
    pub centrality: Vec<DVector<f64>>,
}

impl NewtonResidual {
    fn sq(v: &[DVector<f64>]) -> f64 {
        v.iter().map(|b| b.norm_squared()).sum()
    }

    /// Squared norm of the blocks the coupled system keeps (everything except the two
    /// eliminated rows).
    pub fn coupled_norm_sq(&self) -> f64 {
        Self::sq(&self.dual)
            + self.consensus.norm_squared()
            + Self::sq(&self.primal2)
            + Self::sq(&self.consistency)
    }

    /// Largest magnitude in the eliminated rows (primal inequality and complementarity).
    pub fn eliminated_max(&self) -> f64 {
        self.primal1.iter().chain(&self.centrality).map(|b| b.amax()).fold(0.0, f64::max)
    }

    pub fn norm_sq(&self) -> f64 {
        self.coupled_norm_sq() + Self::sq(&self.primal1) + Self::sq(&self.centrality)
    }
}

/// Evaluates the full Newton residual straight from the problem data, without using the
/// condensed quantities. This is the independent route to `‖r̂‖`.
pub fn full_newton_residual(
    problem: &CoupledProblem,
    z: &Iterate,
    dz: &Direction,
    mu: f64,
) -> Result<NewtonResidual> {
    let bundles = all_residuals(problem, z)?;
    let mut out = NewtonResidual {
        dual: Vec::new(),
        consensus: -(scatter_sum(problem, &z.v_c) + scatter_sum(problem, &dz.dv_c)),
        primal1: Vec::new(),
        primal2: Vec::new(),
        consistency: Vec::new(),
        centrality: Vec::new(),
    };
    for (i, a) in problem.agents.iter().enumerate() {
        let b = &bundles[i];
        let dw = &dz.dw[i];
        out.dual.push(
            a.hessian() * dw
                + a.a_in.tr_mul(&dz.dlambda[i])
                + a.a_eq.tr_mul(&dz.dv[i])
                + &dz.dv_c[i]
                + &b.r_dual,
        );
        out.primal1.push(&a.a_in * dw + &dz.ds[i] + &b.r_primal1);
        out.primal2.push(&a.a_eq * dw + &b.r_primal2);
        out.consistency.push(dw - lift(&dz.dx, &a.indices) + &b.r_c);
        out.centrality.push(
            (z.lambda[i].component_mul(&dz.ds[i]) + z.s[i].component_mul(&dz.dlambda[i]) + &b.r_cent)
                .add_scalar(-mu),
        );
    }
    Ok(out)
}
