//! Loosely coupled problem data, the random instance generator and the problem file format.
//!
//! Each agent owns a quadratic objective `wᵀPw + qᵀw + e` over its local copy `w` of the
//! global entries listed in `indices`, affine inequalities `A_in w + b_in ⪯ 0` and equalities
//! `A_eq w = b_eq`. Local copies are tied to the global vector `x` through `w = x[indices]`.
//!
//! Selection matrices are never formed: [`lift`] gathers and [`scatter_add`] accumulates.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};

/// Singular values below `RANK_TOL * σ_max` count as zero.
pub const RANK_TOL: f64 = 1e-10;

const MAX_REDRAWS: usize = 16;

/// One agent's block of the coupled problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSubproblem {
    pub index: usize,
    /// Symmetric PSD quadratic term; the objective is `wᵀPw`, so its Hessian is `2P`.
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub e: f64,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Strictly increasing global indices of the entries this agent touches.
    pub indices: Vec<usize>,
}

impl AgentSubproblem {
    /// Builds a validated subproblem. `p` is symmetrized.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: usize,
        p: DMatrix<f64>,
        q: DVector<f64>,
        e: f64,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        indices: Vec<usize>,
    ) -> Result<Self> {
        let p = symmetrize(&p);
        let sub = Self { index, p, q, e, a_in, b_in, a_eq, b_eq, indices };
        sub.validate_shapes()?;
        Ok(sub)
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.a_in.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.a_eq.nrows()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.p * w)) + self.q.dot(w) + self.e
    }

    pub fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.p * w * 2.0 + &self.q
    }

    pub fn hessian(&self) -> DMatrix<f64> {
        &self.p * 2.0
    }

    /// `A_in w + b_in`; feasible points make this nonpositive.
    pub fn ineq(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.a_in * w + &self.b_in
    }

    fn validate_shapes(&self) -> Result<()> {
        let d = self.dim();
        let bad = |what: &str| {
            Err(SolverError::Structural(format!("agent {}: {what}", self.index)))
        };
        if self.p.nrows() != d || self.p.ncols() != d {
            return bad("P must be |J|×|J|");
        }
        if self.q.len() != d {
            return bad("q must have length |J|");
        }
        if self.a_in.ncols() != d || self.b_in.len() != self.a_in.nrows() {
            return bad("inequality block has inconsistent shape");
        }
        if self.a_eq.ncols() != d || self.b_eq.len() != self.a_eq.nrows() {
            return bad("equality block has inconsistent shape");
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return bad("index set must be strictly increasing");
        }
        Ok(())
    }

    /// Checks the numerical invariants: `p < |J|`, full row rank of `A_eq`, and PSD `P`.
    pub fn validate_numerics(&self) -> Result<()> {
        if self.n_eq() >= self.dim() {
            return Err(SolverError::Structural(format!(
                "agent {}: {} equalities for {} local variables",
                self.index,
                self.n_eq(),
                self.dim()
            )));
        }
        if self.n_eq() > 0 && numerical_rank(&self.a_eq) < self.n_eq() {
            return Err(SolverError::Structural(format!(
                "agent {}: equality block is rank deficient",
                self.index
            )));
        }
        let pnorm = spectral_norm(&self.p);
        let min_eig = self.p.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 * pnorm.max(1.0) {
            return Err(SolverError::Structural(format!(
                "agent {}: P is not positive semidefinite (λ_min = {min_eig:e})",
                self.index
            )));
        }
        Ok(())
    }
}

/// The coupled problem: agents plus the derived ownership and neighbor tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledProblem {
    pub n: usize,
    pub agents: Vec<AgentSubproblem>,
    /// `owners[j]` lists, in ascending order, the agents whose index set contains `j`.
    pub owners: Vec<Vec<usize>>,
    /// `neighbors[i]` = agents sharing at least one index with agent `i` (including `i`).
    pub neighbors: Vec<Vec<usize>>,
}

impl CoupledProblem {
    pub fn new(n: usize, agents: Vec<AgentSubproblem>) -> Result<Self> {
        let mut owners = vec![Vec::new(); n];
        for (i, a) in agents.iter().enumerate() {
            if a.index != i {
                return Err(SolverError::Structural(format!(
                    "agent at position {i} carries index {}",
                    a.index
                )));
            }
            for &j in &a.indices {
                if j >= n {
                    return Err(SolverError::Structural(format!(
                        "agent {i}: global index {j} out of range (n = {n})"
                    )));
                }
                owners[j].push(i);
            }
        }
        if let Some(j) = owners.iter().position(Vec::is_empty) {
            return Err(SolverError::Structural(format!("global index {j} has no owner")));
        }
        let mut neighbors = vec![BTreeSet::new(); agents.len()];
        for own in &owners {
            for &a in own {
                for &b in own {
                    neighbors[a].insert(b);
                }
            }
        }
        let neighbors = neighbors.into_iter().map(|s| s.into_iter().collect()).collect();
        Ok(Self { n, agents, owners, neighbors })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    /// |I_j| for every global index.
    pub fn multiplicity(&self) -> Vec<usize> {
        self.owners.iter().map(Vec::len).collect()
    }

    pub fn total_ineq(&self) -> usize {
        self.agents.iter().map(AgentSubproblem::n_ineq).sum()
    }

    pub fn total_eq(&self) -> usize {
        self.agents.iter().map(AgentSubproblem::n_eq).sum()
    }

    /// Number of consistency constraints, Σ|J_i|.
    pub fn total_local(&self) -> usize {
        self.agents.iter().map(AgentSubproblem::dim).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.agents.iter().try_for_each(AgentSubproblem::validate_numerics)
    }

    /// Objective of the split formulation evaluated at local copies.
    pub fn objective_local(&self, w: &[DVector<f64>]) -> f64 {
        self.agents.iter().zip(w).map(|(a, wi)| a.objective(wi)).sum()
    }

    /// Objective of the original formulation evaluated at a global point.
    pub fn objective_global(&self, x: &DVector<f64>) -> f64 {
        self.agents.iter().map(|a| a.objective(&lift(x, &a.indices))).sum()
    }

    /// Collapses the problem into a single agent over all `n` variables. Used by the
    /// centralized reference solver.
    pub fn centralized(&self) -> Result<AgentSubproblem> {
        let n = self.n;
        let m = self.total_ineq();
        let p = self.total_eq();
        let mut pm = DMatrix::zeros(n, n);
        let mut q = DVector::zeros(n);
        let mut e = 0.0;
        let mut a_in = DMatrix::zeros(m, n);
        let mut b_in = DVector::zeros(m);
        let mut a_eq = DMatrix::zeros(p, n);
        let mut b_eq = DVector::zeros(p);
        let (mut row_in, mut row_eq) = (0, 0);
        for a in &self.agents {
            for (li, &gi) in a.indices.iter().enumerate() {
                q[gi] += a.q[li];
                for (lj, &gj) in a.indices.iter().enumerate() {
                    pm[(gi, gj)] += a.p[(li, lj)];
                }
            }
            e += a.e;
            for r in 0..a.n_ineq() {
                for (lj, &gj) in a.indices.iter().enumerate() {
                    a_in[(row_in + r, gj)] = a.a_in[(r, lj)];
                }
                b_in[row_in + r] = a.b_in[r];
            }
            for r in 0..a.n_eq() {
                for (lj, &gj) in a.indices.iter().enumerate() {
                    a_eq[(row_eq + r, gj)] = a.a_eq[(r, lj)];
                }
                b_eq[row_eq + r] = a.b_eq[r];
            }
            row_in += a.n_ineq();
            row_eq += a.n_eq();
        }
        AgentSubproblem::new(0, pm, q, e, a_in, b_in, a_eq, b_eq, (0..n).collect())
    }
}

/// `x[J]`.
pub fn lift(x: &DVector<f64>, indices: &[usize]) -> DVector<f64> {
    DVector::from_iterator(indices.len(), indices.iter().map(|&j| x[j]))
}

/// Checked variant of [`lift`].
pub fn try_lift(x: &DVector<f64>, indices: &[usize]) -> Result<DVector<f64>> {
    if let Some(&j) = indices.iter().find(|&&j| j >= x.len()) {
        return Err(SolverError::Structural(format!(
            "index {j} out of range for vector of length {}",
            x.len()
        )));
    }
    Ok(lift(x, indices))
}

/// `acc += E_Jᵀ w`.
pub fn scatter_add(w: &DVector<f64>, indices: &[usize], acc: &mut DVector<f64>) {
    debug_assert_eq!(w.len(), indices.len());
    for (k, &j) in indices.iter().enumerate() {
        acc[j] += w[k];
    }
}

/// Checked variant of [`scatter_add`].
pub fn try_scatter_add(w: &DVector<f64>, indices: &[usize], acc: &mut DVector<f64>) -> Result<()> {
    if w.len() != indices.len() {
        return Err(SolverError::Structural(format!(
            "scatter of {} values over {} indices",
            w.len(),
            indices.len()
        )));
    }
    if let Some(&j) = indices.iter().find(|&&j| j >= acc.len()) {
        return Err(SolverError::Structural(format!(
            "index {j} out of range for accumulator of length {}",
            acc.len()
        )));
    }
    scatter_add(w, indices, acc);
    Ok(())
}

/// `Σ_i E_{J_i}ᵀ v_i`, accumulated in ascending agent order.
pub fn scatter_sum(problem: &CoupledProblem, per_agent: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(problem.n);
    for (a, v) in problem.agents.iter().zip(per_agent) {
        scatter_add(v, &a.indices, &mut acc);
    }
    acc
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

/// `1e-6 · max{1, ‖blkdiag P‖, ‖blkdiag A_in‖, ‖blkdiag A_eq‖, ‖b_in‖, ‖b_eq‖, ‖q‖}`.
///
/// Block-diagonal spectral norms are the maximum over blocks; vector norms are taken over
/// the stacked vectors.
pub fn tolerance_scale(problem: &CoupledProblem) -> f64 {
    let blk = |f: &dyn Fn(&AgentSubproblem) -> &DMatrix<f64>| {
        problem.agents.iter().map(|a| spectral_norm(f(a))).fold(0.0, f64::max)
    };
    let stacked = |f: &dyn Fn(&AgentSubproblem) -> &DVector<f64>| {
        problem.agents.iter().map(|a| f(a).norm_squared()).sum::<f64>().sqrt()
    };
    let scale = [
        1.0,
        blk(&|a| &a.p),
        blk(&|a| &a.a_in),
        blk(&|a| &a.a_eq),
        stacked(&|a| &a.b_in),
        stacked(&|a| &a.b_eq),
        stacked(&|a| &a.q),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    1e-6 * scale
}

/// Random instance generator settings. Integer ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemGenConfig {
    pub agents: usize,
    pub local_size: (usize, usize),
    pub eq_count: (usize, usize),
    pub ineq_count: (usize, usize),
    /// Index sets are drawn from `0..index_pool` and then relabelled densely.
    pub index_pool: usize,
    pub seed: u64,
}

impl Default for ProblemGenConfig {
    fn default() -> Self {
        Self {
            agents: 50,
            local_size: (55, 65),
            eq_count: (7, 13),
            ineq_count: (27, 33),
            index_pool: 900,
            seed: 0,
        }
    }
}

impl ProblemGenConfig {
    /// The reduced N = 10 set-up used for desk-scale experiments. Every default range is
    /// scaled by the local-size ratio 12.5/60, so the index pool keeps the default's
    /// draws-per-index density at ten agents.
    pub fn desk(seed: u64) -> Self {
        Self {
            agents: 10,
            local_size: (10, 15),
            eq_count: (2, 4),
            ineq_count: (5, 8),
            index_pool: 190,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (usize, usize)| lo <= hi;
        if self.agents == 0 {
            return Err(SolverError::Config("agent count must be positive".into()));
        }
        if !range_ok(self.local_size) || !range_ok(self.eq_count) || !range_ok(self.ineq_count) {
            return Err(SolverError::Config("range bounds must satisfy lo ≤ hi".into()));
        }
        if self.local_size.0 == 0 {
            return Err(SolverError::Config("local size must be positive".into()));
        }
        if self.eq_count.1 >= self.local_size.0 {
            return Err(SolverError::Config(
                "equality count must stay below the local size".into(),
            ));
        }
        if self.local_size.1 > self.index_pool {
            return Err(SolverError::Config("local size exceeds the index pool".into()));
        }
        Ok(())
    }
}

/// Point used to back-solve the constraint offsets; the generated problem is strictly
/// feasible at it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleWitness {
    pub x: DVector<f64>,
    pub slacks: Vec<DVector<f64>>,
}

/// Draws a feasible loosely coupled QP.
///
/// RNG streams: a ChaCha8 generator seeded with `config.seed` on stream 0 draws all
/// structural quantities (sizes, index sets, the feasible point); agent `i` draws its
/// matrices from the same seed on stream `i + 1`. Results are therefore identical across
/// platforms and independent of the order agents are processed in.
pub fn generate(config: &ProblemGenConfig) -> Result<CoupledProblem> {
    generate_with_witness(config).map(|(p, _)| p)
}

pub fn generate_with_witness(config: &ProblemGenConfig) -> Result<(CoupledProblem, FeasibleWitness)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);

    let mut shapes = Vec::with_capacity(config.agents);
    let mut raw_sets = Vec::with_capacity(config.agents);
    for _ in 0..config.agents {
        let d = rng.random_range(config.local_size.0..=config.local_size.1);
        let p = rng.random_range(config.eq_count.0..=config.eq_count.1);
        let m = rng.random_range(config.ineq_count.0..=config.ineq_count.1);
        let mut set: Vec<usize> = sample(&mut rng, config.index_pool, d).into_vec();
        set.sort_unstable();
        shapes.push((d, p, m));
        raw_sets.push(set);
    }
    // Relabel the used pool entries to 0..n.
    let used: BTreeSet<usize> = raw_sets.iter().flatten().copied().collect();
    let n = used.len();
    let relabel: std::collections::BTreeMap<usize, usize> =
        used.into_iter().enumerate().map(|(new, old)| (old, new)).collect();
    let sets: Vec<Vec<usize>> =
        raw_sets.iter().map(|s| s.iter().map(|j| relabel[j]).collect()).collect();
    let x = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));

    let mut agent_rngs: Vec<ChaCha8Rng> = (0..config.agents)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect();

    let mut agents = Vec::with_capacity(config.agents);
    let mut slacks = Vec::with_capacity(config.agents);
    for (i, ((d, p, m), set)) in shapes.iter().copied().zip(&sets).enumerate() {
        let r = &mut agent_rngs[i];
        let xj = lift(&x, set);
        let a_in = uniform_matrix(r, m, d, 0.0, 1.0);
        let s = DVector::from_fn(m, |_, _| r.random_range(1.0..10.0));
        let b_in = -(&a_in * &xj) - &s;
        let mut a_eq = uniform_matrix(r, p, d, 0.0, 1.0);
        let mut tries = 0;
        while p > 0 && numerical_rank(&a_eq) < p {
            tries += 1;
            if tries > MAX_REDRAWS {
                return Err(SolverError::Generation(format!(
                    "agent {i}: equality block stayed rank deficient after {MAX_REDRAWS} redraws"
                )));
            }
            a_eq = uniform_matrix(r, p, d, 0.0, 1.0);
        }
        let b_eq = &a_eq * &xj;
        let b = uniform_matrix(r, d, d, 0.0, 1.0);
        let pm = b.transpose() * &b / d as f64;
        let q = DVector::from_fn(d, |_, _| r.random_range(0.0..1.0));
        let e = r.random_range(0.0..10.0);
        agents.push(AgentSubproblem::new(i, pm, q, e, a_in, b_in, a_eq, b_eq, set.clone())?);
        slacks.push(s);
    }
    let problem = CoupledProblem::new(n, agents)?;
    problem.validate()?;
    Ok((problem, FeasibleWitness { x, slacks }))
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    // Row-major draw order so the stream layout does not depend on nalgebra's storage.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.random_range(lo..hi);
        }
    }
    m
}

// ---------------------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------------------

/// Identifier written into every problem file.
pub const FILE_FORMAT: &str = "coupled-ipm/problem";
pub const FILE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    format: String,
    version: u32,
    n: usize,
    agents: Vec<AgentRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    indices: Vec<usize>,
    p: MatrixRecord,
    q: Vec<f64>,
    e: f64,
    a_in: MatrixRecord,
    b_in: Vec<f64>,
    a_eq: MatrixRecord,
    b_eq: Vec<f64>,
}

/// Dense matrix stored row-major.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixRecord {
    fn from(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect();
        Self { rows: m.nrows(), cols: m.ncols(), data }
    }
}

impl TryFrom<MatrixRecord> for DMatrix<f64> {
    type Error = SolverError;

    fn try_from(m: MatrixRecord) -> Result<Self> {
        if m.data.len() != m.rows * m.cols {
            return Err(SolverError::Format(format!(
                "matrix {}×{} carries {} entries",
                m.rows,
                m.cols,
                m.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(m.rows, m.cols, &m.data))
    }
}

impl CoupledProblem {
    /// Serializes to the versioned JSON container.
    pub fn to_json(&self) -> String {
        let file = ProblemFile {
            format: FILE_FORMAT.to_string(),
            version: FILE_VERSION,
            n: self.n,
            agents: self
                .agents
                .iter()
                .map(|a| AgentRecord {
                    indices: a.indices.clone(),
                    p: (&a.p).into(),
                    q: a.q.as_slice().to_vec(),
                    e: a.e,
                    a_in: (&a.a_in).into(),
                    b_in: a.b_in.as_slice().to_vec(),
                    a_eq: (&a.a_eq).into(),
                    b_eq: a.b_eq.as_slice().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("problem serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ProblemFile =
            serde_json::from_str(text).map_err(|e| SolverError::Format(e.to_string()))?;
        if file.format != FILE_FORMAT {
            return Err(SolverError::Format(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != FILE_VERSION {
            return Err(SolverError::Format(format!("unsupported version {}", file.version)));
        }
        let agents = file
            .agents
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                AgentSubproblem::new(
                    i,
                    r.p.try_into()?,
                    DVector::from_vec(r.q),
                    r.e,
                    r.a_in.try_into()?,
                    DVector::from_vec(r.b_in),
                    r.a_eq.try_into()?,
                    DVector::from_vec(r.b_eq),
                    r.indices,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        CoupledProblem::new(file.n, agents)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tiny_agent(index: usize, indices: Vec<usize>) -> AgentSubproblem {
        let d = indices.len();
        AgentSubproblem::new(
            index,
            DMatrix::identity(d, d),
            DVector::zeros(d),
            0.0,
            DMatrix::zeros(0, d),
            DVector::zeros(0),
            DMatrix::zeros(0, d),
            DVector::zeros(0),
            indices,
        )
        .unwrap()
    }

    #[test]
    fn lift_gathers_entries() {
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(lift(&x, &[0, 2]).as_slice(), &[1.0, 3.0]);
        assert!(try_lift(&x, &[0, 3]).is_err());
    }

    #[test]
    fn scatter_checks_bounds() {
        let mut acc = DVector::zeros(2);
        let w = DVector::from_vec(vec![1.0]);
        assert!(try_scatter_add(&w, &[2], &mut acc).is_err());
        assert!(try_scatter_add(&w, &[0, 1], &mut acc).is_err());
        try_scatter_add(&w, &[1], &mut acc).unwrap();
        assert_eq!(acc.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn averaging_identity_recovers_x() {
        let problem = generate(&ProblemGenConfig::desk(3)).unwrap();
        let x = DVector::from_fn(problem.n, |j, _| j as f64 * 0.5 - 3.0);
        let lifted: Vec<_> = problem.agents.iter().map(|a| lift(&x, &a.indices)).collect();
        let sum = scatter_sum(&problem, &lifted);
        let mult = problem.multiplicity();
        for j in 0..problem.n {
            assert_relative_eq!(sum[j] / mult[j] as f64, x[j], epsilon = 1e-14);
        }
    }

    #[test]
    fn scatter_of_ones_is_multiplicity() {
        let problem = generate(&ProblemGenConfig::desk(4)).unwrap();
        let ones: Vec<_> = problem.agents.iter().map(|a| DVector::repeat(a.dim(), 1.0)).collect();
        let sum = scatter_sum(&problem, &ones);
        for (j, m) in problem.multiplicity().into_iter().enumerate() {
            assert_eq!(sum[j], m as f64);
            assert!(m >= 1);
        }
    }

    #[test]
    fn neighbor_sets_are_symmetric() {
        let problem = generate(&ProblemGenConfig::desk(5)).unwrap();
        for (i, ne) in problem.neighbors.iter().enumerate() {
            assert!(ne.contains(&i));
            for &j in ne {
                assert!(problem.neighbors[j].contains(&i));
            }
        }
    }

    #[test]
    fn single_agent_has_only_itself_as_neighbor() {
        let cfg = ProblemGenConfig {
            agents: 1,
            local_size: (8, 8),
            eq_count: (2, 2),
            ineq_count: (3, 3),
            index_pool: 8,
            seed: 1,
        };
        let problem = generate(&cfg).unwrap();
        assert_eq!(problem.n, 8);
        assert_eq!(problem.agents[0].indices, (0..8).collect::<Vec<_>>());
        assert_eq!(problem.neighbors, vec![vec![0]]);
    }

    #[test]
    fn generated_problem_is_feasible_at_witness() {
        let (problem, witness) = generate_with_witness(&ProblemGenConfig::desk(11)).unwrap();
        for (a, s) in problem.agents.iter().zip(&witness.slacks) {
            let w = lift(&witness.x, &a.indices);
            let g = a.ineq(&w);
            assert!((&g + s).amax() <= 1e-10);
            assert!(g.max() < 0.0);
            assert!((&a.a_eq * &w - &a.b_eq).amax() <= 1e-10);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&ProblemGenConfig::desk(21)).unwrap();
        let b = generate(&ProblemGenConfig::desk(21)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = generate(&ProblemGenConfig::desk(22)).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn default_scale_generation_has_expected_magnitudes() {
        let problem = generate(&ProblemGenConfig { seed: 2, ..Default::default() }).unwrap();
        let consistency = problem.total_local();
        assert!((2800..=3300).contains(&consistency), "Σ|J_i| = {consistency}");
        assert!((1300..=1700).contains(&problem.total_ineq()));
        assert!(problem.n <= 900 && problem.n > 800);
        let eps = tolerance_scale(&problem);
        assert!(eps > 1e-3 && eps < 2e-2, "ε = {eps}");
    }

    #[test]
    fn tolerance_scale_of_zero_data_is_floor() {
        let mut a = tiny_agent(0, vec![0, 1]);
        a.p = DMatrix::zeros(2, 2);
        let problem = CoupledProblem::new(2, vec![a]).unwrap();
        assert_eq!(tolerance_scale(&problem), 1e-6);
    }

    #[test]
    fn tolerance_scale_tracks_largest_norm() {
        let mut a = tiny_agent(0, vec![0, 1]);
        a.p = DMatrix::from_diagonal(&DVector::from_vec(vec![2000.0, 1.0]));
        let problem = CoupledProblem::new(2, vec![a]).unwrap();
        assert_relative_eq!(tolerance_scale(&problem), 2e-3, max_relative = 1e-12);
    }

    #[test]
    fn structural_errors_are_reported() {
        assert!(CoupledProblem::new(3, vec![tiny_agent(0, vec![0, 1])]).is_err());
        assert!(CoupledProblem::new(2, vec![tiny_agent(0, vec![0, 2])]).is_err());
        let bad = AgentSubproblem::new(
            0,
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            0.0,
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            vec![1, 0],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn rank_deficient_equalities_are_rejected() {
        let mut a = tiny_agent(0, vec![0, 1, 2]);
        a.a_eq = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        a.b_eq = DVector::zeros(2);
        assert!(a.validate_numerics().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ProblemGenConfig::desk(0);
        cfg.eq_count = (10, 12);
        assert!(generate(&cfg).is_err());
        cfg = ProblemGenConfig::desk(0);
        cfg.agents = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn file_round_trip_and_version_guard() {
        let problem = generate(&ProblemGenConfig::desk(8)).unwrap();
        let text = problem.to_json();
        assert_eq!(CoupledProblem::from_json(&text).unwrap(), problem);
        let bumped = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(CoupledProblem::from_json(&bumped), Err(SolverError::Format(_))));
    }

    #[test]
    fn centralized_objective_matches_split_objective() {
        let problem = generate(&ProblemGenConfig::desk(9)).unwrap();
        let central = problem.centralized().unwrap();
        let x = DVector::from_fn(problem.n, |j, _| (j as f64).sin());
        assert_relative_eq!(central.objective(&x), problem.objective_global(&x), max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn lift_and_scatter_are_adjoint(
            xs in proptest::collection::vec(-5.0f64..5.0, 12),
            ws in proptest::collection::vec(-5.0f64..5.0, 5),
            picks in proptest::sample::subsequence((0..12usize).collect::<Vec<_>>(), 5),
        ) {
            let x = DVector::from_vec(xs);
            let w = DVector::from_vec(ws);
            let lhs = lift(&x, &picks).dot(&w);
            let mut acc = DVector::zeros(12);
            scatter_add(&w, &picks, &mut acc);
            let rhs = x.dot(&acc);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
