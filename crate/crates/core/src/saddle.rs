//! Dense saddle-point form of the direction system and the fixed-point view of ADMM.
//!
//! Unknowns are ordered `(ΔW, Δx, ū)` with `ū = (Δv̄, Δv̄_c)`, the ρ-scaled duals. With
//! `F̃₁ = blkdiag H_pd`, `f̃₁ = r`, `f̃₂ = −Ēᵀv_c`, `A = [blkdiag Ā; I]`, `B = [0; −Ē]`
//! and `c = −(r_p2; r_c)`:
//!
//! ```text
//! A_KKT = [ F̃₁   0    ρAᵀ ]      b_KKT = [ −f̃₁ ]
//!         [ 0    0    ρBᵀ ]              [ −f̃₂ ]
//!         [ ρA   ρB   0   ]              [ ρc  ]
//! ```
//!
//! | here        | ADMM state          | coupled direction |
//! |-------------|---------------------|-------------------|
//! | `ΔW`        | `dw`                | `Δw`              |
//! | `Δx`        | `dx`                | `Δx`              |
//! | `ū₁`        | `dvbar`             | `Δv / ρ`          |
//! | `ū₂`        | `dvbar_c`           | `Δv_c / ρ`        |
//!
//! Everything here is dense and meant for verification only.

use nalgebra::{DMatrix, DVector};

use crate::admm::{self, AdmmSettings, OuterSystem};
use crate::error::{Result, SolverError};
use crate::kkt::{all_residuals, complete_direction, hpd, r_vec, CoupledLayout, Direction, Iterate, DENSE_LIMIT};
use crate::netsim::Network;
use crate::problem::CoupledProblem;

#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub rho: f64,
    pub mu: f64,
    pub layout: CoupledLayout,
    pub f1: DMatrix<f64>,
    pub f1_vec: DVector<f64>,
    pub f2_vec: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_kkt: DMatrix<f64>,
    pub b_kkt: DVector<f64>,
}

/// Solution of the saddle system split into its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSolution {
    pub dw: Vec<DVector<f64>>,
    pub dx: DVector<f64>,
    pub dvbar: Vec<DVector<f64>>,
    pub dvbar_c: Vec<DVector<f64>>,
}

impl SaddleSystem {
    pub fn assemble(problem: &CoupledProblem, z: &Iterate, mu: f64, rho: f64) -> Result<Self> {
        z.check_shapes(problem)?;
        if !(rho > 0.0) {
            return Err(SolverError::Config("ρ must be positive".into()));
        }
        let layout = CoupledLayout::new(problem);
        if layout.size > DENSE_LIMIT {
            return Err(SolverError::Structural(format!(
                "saddle system of size {} exceeds the oracle limit {DENSE_LIMIT}",
                layout.size
            )));
        }
        let nw = layout.x_off;
        let n = problem.n;
        let nu = layout.size - nw - n;
        let u0 = nw + n;
        let bundles = all_residuals(problem, z)?;

        let mut f1 = DMatrix::zeros(nw, nw);
        let mut f1_vec = DVector::zeros(nw);
        let mut f2_vec = DVector::zeros(n);
        let mut a = DMatrix::zeros(nu, nw);
        let mut b = DMatrix::zeros(nu, n);
        let mut c = DVector::zeros(nu);
        for (i, sub) in problem.agents.iter().enumerate() {
            let (wo, d, p) = (layout.w_off[i], sub.dim(), sub.n_eq());
            let vo = layout.v_off[i] - u0;
            let co = layout.vc_off[i] - u0;
            f1.view_mut((wo, wo), (d, d)).copy_from(&hpd(sub, &z.s[i], &z.lambda[i])?);
            f1_vec.rows_mut(wo, d).copy_from(&r_vec(sub, &bundles[i], &z.s[i], &z.lambda[i], mu)?);
            a.view_mut((vo, wo), (p, d)).copy_from(&sub.a_eq);
            c.rows_mut(vo, p).copy_from(&(-&bundles[i].r_primal2));
            c.rows_mut(co, d).copy_from(&(-&bundles[i].r_c));
            for (l, &j) in sub.indices.iter().enumerate() {
                a[(co + l, wo + l)] = 1.0;
                b[(co + l, j)] = -1.0;
                f2_vec[j] -= z.v_c[i][l];
            }
        }

        let size = layout.size;
        let mut a_kkt = DMatrix::zeros(size, size);
        a_kkt.view_mut((0, 0), (nw, nw)).copy_from(&f1);
        a_kkt.view_mut((0, u0), (nw, nu)).copy_from(&(a.transpose() * rho));
        a_kkt.view_mut((nw, u0), (n, nu)).copy_from(&(b.transpose() * rho));
        a_kkt.view_mut((u0, 0), (nu, nw)).copy_from(&(&a * rho));
        a_kkt.view_mut((u0, nw), (nu, n)).copy_from(&(&b * rho));
        let mut b_kkt = DVector::zeros(size);
        b_kkt.rows_mut(0, nw).copy_from(&(-&f1_vec));
        b_kkt.rows_mut(nw, n).copy_from(&(-&f2_vec));
        b_kkt.rows_mut(u0, nu).copy_from(&(&c * rho));
        Ok(Self { rho, mu, layout, f1, f1_vec, f2_vec, a, b, c, a_kkt, b_kkt })
    }

    pub fn size(&self) -> usize {
        self.layout.size
    }

    /// `(ΣJ_i, n, Σp_i + ΣJ_i)`.
    pub fn block_dims(&self) -> (usize, usize, usize) {
        (self.f1.nrows(), self.b.ncols(), self.a.nrows())
    }

    /// LU solve; a singular matrix means the Newton Jacobian is singular at this point.
    pub fn direct_solve(&self) -> Result<DVector<f64>> {
        let sol = self.a_kkt.clone().lu().solve(&self.b_kkt).ok_or_else(|| {
            SolverError::SingularSystem("saddle matrix is singular (nonsingular Jacobian assumption violated)".into())
        })?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::SingularSystem("saddle solve produced non-finite values".into()));
        }
        Ok(sol)
    }

    pub fn split(&self, problem: &CoupledProblem, y: &DVector<f64>) -> SaddleSolution {
        let (dw, dx, dvbar, dvbar_c) = self.layout.split(problem, y);
        SaddleSolution { dw, dx, dvbar, dvbar_c }
    }

    pub fn pack(&self, problem: &CoupledProblem, s: &SaddleSolution) -> DVector<f64> {
        let mut y = DVector::zeros(self.size());
        for (i, a) in problem.agents.iter().enumerate() {
            y.rows_mut(self.layout.w_off[i], a.dim()).copy_from(&s.dw[i]);
            y.rows_mut(self.layout.v_off[i], a.n_eq()).copy_from(&s.dvbar[i]);
            y.rows_mut(self.layout.vc_off[i], a.dim()).copy_from(&s.dvbar_c[i]);
        }
        y.rows_mut(self.layout.x_off, problem.n).copy_from(&s.dx);
        y
    }

    /// Full direction from a saddle solution: unscales the duals and recovers `(Δs, Δλ)`.
    pub fn direction(&self, problem: &CoupledProblem, z: &Iterate, y: &DVector<f64>) -> Result<Direction> {
        let s = self.split(problem, y);
        let rho = self.rho;
        complete_direction(
            problem,
            z,
            self.mu,
            s.dw,
            s.dx,
            s.dvbar.iter().map(|v| v * rho).collect(),
            s.dvbar_c.iter().map(|v| v * rho).collect(),
        )
    }

    /// `M_PRE,1 = [F̃₁ −ρAᵀB ρAᵀ; 0 0 ρBᵀ; ρA ρB −ρI]`.
    pub fn m_pre1(&self) -> DMatrix<f64> {
        let (nw, n, nu) = self.block_dims();
        let rho = self.rho;
        let mut m = self.a_kkt.clone();
        m.view_mut((0, nw), (nw, n)).copy_from(&(self.a.transpose() * &self.b * (-rho)));
        m.view_mut((nw + n, nw + n), (nu, nu)).copy_from(&(DMatrix::identity(nu, nu) * (-rho)));
        m
    }

    /// `M_PRE,2 = [I 0 −Aᵀ; 0 I −Bᵀ; 0 0 I]`.
    pub fn m_pre2(&self) -> DMatrix<f64> {
        let (nw, n, nu) = self.block_dims();
        let mut m = DMatrix::identity(self.size(), self.size());
        m.view_mut((0, nw + n), (nw, nu)).copy_from(&(-self.a.transpose()));
        m.view_mut((nw, nw + n), (n, nu)).copy_from(&(-self.b.transpose()));
        m
    }

    /// Block formulas of the ADMM map `y ↦ Gy + f` (no over-relaxation).
    pub fn fixed_point_form(&self) -> Result<FixedPointForm> {
        let (nw, n, nu) = self.block_dims();
        let rho = self.rho;
        let (a, b) = (&self.a, &self.b);
        let singular = |what: &str| SolverError::SingularSystem(format!("{what} is singular"));
        let m1 = (&self.f1 + a.transpose() * a * rho).try_inverse().ok_or_else(|| singular("F̃₁ + ρAᵀA"))?;
        let m2 = (b.transpose() * b * rho).try_inverse().ok_or_else(|| singular("ρBᵀB"))?;
        let size = self.size();

        // ΔW' = −ρM₁AᵀB Δx − ρM₁Aᵀ ū + m₁
        let mut tw = DMatrix::zeros(nw, size);
        tw.view_mut((0, nw), (nw, n)).copy_from(&(&m1 * a.transpose() * b * (-rho)));
        tw.view_mut((0, nw + n), (nw, nu)).copy_from(&(&m1 * a.transpose() * (-rho)));
        let m1_vec = &m1 * (-&self.f1_vec + a.transpose() * &self.c * rho);
        // Δx' = −ρM₂BᵀA ΔW' − ρM₂Bᵀ ū + M₂(−f̃₂ + ρBᵀc)
        let mba = &m2 * b.transpose() * a * (-rho);
        let mut tx = &mba * &tw;
        let ub = &m2 * b.transpose() * (-rho);
        {
            let mut blk = tx.view_mut((0, nw + n), (n, nu));
            blk += &ub;
        }
        let m2_vec = &mba * &m1_vec + &m2 * (-&self.f2_vec + b.transpose() * &self.c * rho);
        // ū' = ū + AΔW' + BΔx' − c
        let mut tu = a * &tw + b * &tx;
        {
            let mut blk = tu.view_mut((0, nw + n), (nu, nu));
            blk += DMatrix::<f64>::identity(nu, nu);
        }
        let fu = a * &m1_vec + b * &m2_vec - &self.c;

        let mut g = DMatrix::zeros(size, size);
        g.view_mut((0, 0), (nw, size)).copy_from(&tw);
        g.view_mut((nw, 0), (n, size)).copy_from(&tx);
        g.view_mut((nw + n, 0), (nu, size)).copy_from(&tu);
        let mut f = DVector::zeros(size);
        f.rows_mut(0, nw).copy_from(&m1_vec);
        f.rows_mut(nw, n).copy_from(&m2_vec);
        f.rows_mut(nw + n, nu).copy_from(&fu);
        Ok(FixedPointForm { g, f, m1, m2, m1_vec, m2_vec })
    }

    /// One block Gauss–Seidel sweep on the primal rows of the augmented (Uzawa) system at
    /// fixed `ū`, starting from `Δx`:
    ///
    /// ```text
    /// [ F̃₁ + ρAᵀA   ρAᵀB ] [ΔW]   [ −f̃₁ − ρAᵀ(ū − c) ]
    /// [ ρBᵀA        ρBᵀB ] [Δx] = [ −f̃₂ − ρBᵀ(ū − c) ]
    /// ```
    pub fn gauss_seidel_sweep(&self, dx: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let rho = self.rho;
        let (a, b) = (&self.a, &self.b);
        let shifted = u - &self.c;
        let k11 = &self.f1 + a.transpose() * a * rho;
        let rhs1 = -&self.f1_vec - a.transpose() * &shifted * rho - a.transpose() * b * dx * rho;
        let dw = k11.lu().solve(&rhs1).ok_or_else(|| SolverError::SingularSystem("Gauss–Seidel W block".into()))?;
        let k22 = b.transpose() * b * rho;
        let rhs2 = -&self.f2_vec - b.transpose() * &shifted * rho - b.transpose() * a * &dw * rho;
        let dx = k22.lu().solve(&rhs2).ok_or_else(|| SolverError::SingularSystem("Gauss–Seidel x block".into()))?;
        Ok((dw, dx))
    }

    /// Largest relative mismatch between a Gauss–Seidel sweep from each recorded ADMM state
    /// and the primal part of the next state.
    pub fn gauss_seidel_check(&self, trajectory: &[DVector<f64>]) -> Result<f64> {
        let (nw, n, nu) = self.block_dims();
        let mut worst: f64 = 0.0;
        for pair in trajectory.windows(2) {
            let (y, next) = (&pair[0], &pair[1]);
            let (dw, dx) = self.gauss_seidel_sweep(&y.rows(nw, n).into_owned(), &y.rows(nw + n, nu).into_owned())?;
            let expect_w = next.rows(0, nw);
            let expect_x = next.rows(nw, n);
            let scale = expect_w.norm().max(expect_x.norm()).max(1.0);
            worst = worst.max((dw - expect_w).norm() / scale).max((dx - expect_x).norm() / scale);
        }
        Ok(worst)
    }
}

/// `y ↦ Gy + f` with the factors it was built from.
#[derive(Debug, Clone)]
pub struct FixedPointForm {
    pub g: DMatrix<f64>,
    pub f: DVector<f64>,
    /// `(F̃₁ + ρAᵀA)⁻¹`.
    pub m1: DMatrix<f64>,
    /// `(ρBᵀB)⁻¹`.
    pub m2: DMatrix<f64>,
    pub m1_vec: DVector<f64>,
    pub m2_vec: DVector<f64>,
}

impl FixedPointForm {
    pub fn apply(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.g * y + &self.f
    }
}

/// Spectral radius from the eigenvalues of the real Schur form.
pub fn spectral_radius(g: &DMatrix<f64>) -> f64 {
    g.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Packed ADMM states `y₀ = 0, y₁, …, y_steps` of a cold-started run without
/// over-relaxation, in the saddle ordering.
pub fn admm_trajectory(
    problem: &CoupledProblem,
    z: &Iterate,
    mu: f64,
    rho: f64,
    steps: usize,
) -> Result<Vec<DVector<f64>>> {
    let system = OuterSystem::build(problem, z, mu, rho, 0)?;
    let saddle_layout = SaddleSystem::assemble(problem, z, mu, rho)?;
    let n_agents = problem.num_agents();
    let settings = AdmmSettings::uniform(n_agents, rho, 1.0, 0.0, 0.0, steps);
    let mut net = Network::for_problem(problem);
    let mut states = vec![DVector::zeros(saddle_layout.size())];
    let mut obs = |s: &admm::InnerSnapshot| {
        let sol = SaddleSolution {
            dw: s.dw.to_vec(),
            dx: s.dx.clone(),
            dvbar: s.dvbar.to_vec(),
            dvbar_c: s.dvbar_c.to_vec(),
        };
        states.push(saddle_layout.pack(problem, &sol));
    };
    admm::run(problem, z, &system, &settings, None, &mut net, Some(&mut obs))?;
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kkt::dense_direction;
    use crate::problem::{generate, ProblemGenConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64, agents: usize) -> (CoupledProblem, Iterate) {
        let problem = generate(&ProblemGenConfig {
            agents,
            local_size: (4, 6),
            eq_count: (1, 2),
            ineq_count: (2, 3),
            index_pool: 8,
            seed,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = Iterate::initial(&problem, seed);
        for i in 0..agents {
            z.s[i].iter_mut().for_each(|e| *e = rng.random_range(0.5..2.0));
            z.lambda[i].iter_mut().for_each(|e| *e = rng.random_range(0.5..2.0));
        }
        (problem, z)
    }

    /// Spectral radius estimate `‖Gᵏx‖^{1/k}` with renormalisation.
    fn power_radius(g: &DMatrix<f64>, iters: usize) -> f64 {
        let mut x = DVector::from_fn(g.nrows(), |i, _| 1.0 + (i as f64 * 0.37).sin());
        x /= x.norm();
        let mut log_growth = 0.0;
        for _ in 0..iters {
            x = g * x;
            let nx = x.norm();
            if nx == 0.0 {
                return 0.0;
            }
            log_growth += nx.ln();
            x /= nx;
        }
        (log_growth / iters as f64).exp()
    }

    #[test]
    fn dimensions_and_rhs_match_block_counts() {
        let (problem, z) = tiny(1, 3);
        let sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        let sj: usize = problem.agents.iter().map(|a| a.dim()).sum();
        let sp = problem.total_eq();
        assert_eq!(sys.size(), sj + problem.n + sp + sj);
        assert_eq!(sys.block_dims(), (sj, problem.n, sp + sj));
    }

    #[test]
    fn direct_solve_matches_coupled_oracle() {
        let (problem, z) = tiny(2, 3);
        let sys = SaddleSystem::assemble(&problem, &z, 0.05, 0.5).unwrap();
        let y = sys.direct_solve().unwrap();
        let resid = (&sys.a_kkt * &y - &sys.b_kkt).norm();
        assert!(resid <= 1e-9 * sys.b_kkt.norm().max(1.0));
        let dir = sys.direction(&problem, &z, &y).unwrap();
        let oracle = dense_direction(&problem, &z, 0.05).unwrap();
        assert!(dir.coupled_distance(&oracle) <= 1e-9 * oracle.coupled_norm().max(1.0));
    }

    #[test]
    fn zero_rhs_gives_zero_solution() {
        let (problem, z) = tiny(3, 2);
        let mut sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        sys.b_kkt.fill(0.0);
        assert_eq!(sys.direct_solve().unwrap().amax(), 0.0);
    }

    #[test]
    fn fixed_point_identities() {
        let (problem, z) = tiny(4, 2);
        let sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        let fp = sys.fixed_point_form().unwrap();
        let m = sys.m_pre1();
        let m_inv = m.clone().try_inverse().unwrap();
        let g_ref = DMatrix::identity(sys.size(), sys.size()) - &m_inv * &sys.a_kkt;
        assert!((&fp.g - &g_ref).amax() <= 1e-9);
        assert!((&fp.f - &m_inv * &sys.b_kkt).amax() <= 1e-9);
        let y = sys.direct_solve().unwrap();
        assert!((fp.apply(&y) - &y).amax() <= 1e-9 * y.amax().max(1.0));
    }

    #[test]
    fn fixed_point_iteration_reproduces_admm() {
        let (problem, z) = tiny(5, 2);
        let sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        let fp = sys.fixed_point_form().unwrap();
        let traj = admm_trajectory(&problem, &z, 0.1, 0.5, 25).unwrap();
        for pair in traj.windows(2) {
            let scale = pair[1].amax().max(1.0);
            assert!((fp.apply(&pair[0]) - &pair[1]).amax() <= 1e-8 * scale);
        }
        assert!(sys.gauss_seidel_check(&traj).unwrap() <= 1e-9);
    }

    #[test]
    fn gauss_seidel_is_stationary_at_the_solution() {
        let (problem, z) = tiny(6, 2);
        let sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        let y = sys.direct_solve().unwrap();
        assert!(sys.gauss_seidel_check(&[y.clone(), y]).unwrap() <= 1e-9);
    }

    #[test]
    fn second_preconditioner_keeps_the_solution() {
        let (problem, z) = tiny(7, 2);
        let sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        let m2 = sys.m_pre2();
        let y = sys.direct_solve().unwrap();
        let y2 = (&m2 * &sys.a_kkt).lu().solve(&(&m2 * &sys.b_kkt)).unwrap();
        assert!((y2 - &y).amax() <= 1e-9 * y.amax().max(1.0));
    }

    #[test]
    fn spectral_radius_agrees_with_power_iteration() {
        let r = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.25]);
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]);
        let similar = &t * &r * t.clone().try_inverse().unwrap();
        assert!((spectral_radius(&similar) - 0.5).abs() < 1e-12);
        assert!((power_radius(&similar, 400) - 0.5).abs() < 1e-2);

        let (problem, z) = tiny(8, 3);
        let sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        let fp = sys.fixed_point_form().unwrap();
        let rad = spectral_radius(&fp.g);
        assert!(rad < 1.0, "radius {rad}");
        assert!((power_radius(&fp.g, 3000) - rad).abs() < 2e-2);
    }

    #[test]
    fn preconditioner_equal_to_system_gives_zero_radius() {
        let (problem, z) = tiny(9, 2);
        let sys = SaddleSystem::assemble(&problem, &z, 0.1, 0.5).unwrap();
        let m = sys.m_pre1();
        let g = DMatrix::identity(sys.size(), sys.size()) - m.clone().try_inverse().unwrap() * &m;
        assert!(spectral_radius(&g) < 1e-9);
    }
}
