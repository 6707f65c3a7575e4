//! Shared fixtures for the solver benchmarks.

use coupled_ipm::kkt::{all_residuals, Iterate};
use coupled_ipm::problem::{generate, CoupledProblem, ProblemGenConfig};

/// Desk-scale instance with its default starting point.
pub fn desk(seed: u64) -> (CoupledProblem, Iterate) {
    let problem = generate(&ProblemGenConfig::desk(seed)).expect("desk generator is valid");
    let init = Iterate::initial(&problem, seed);
    (problem, init)
}

/// The perturbation `μ = 0.1 · sᵀλ / m` at `z`.
pub fn centring_mu(problem: &CoupledProblem, z: &Iterate) -> f64 {
    let gap: f64 = all_residuals(problem, z).expect("shapes match").iter().map(|b| b.eta_hat).sum();
    0.1 * gap / problem.total_ineq().max(1) as f64
}
