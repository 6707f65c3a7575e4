use thiserror::Error;

/// Errors raised by the solvers and their supporting machinery.
#[derive(Debug, Error)]
pub enum SolverError {
    /// Shapes or index sets disagree.
    #[error("structural error: {0}")]
    Structural(String),

    /// A quantity left its admissible domain (e.g. a nonpositive slack).
    #[error("domain error: {0}")]
    Domain(String),

    /// The coupled Newton system is singular at the current iterate.
    #[error("singular KKT system: {0}")]
    SingularSystem(String),

    /// A cached factorization was used against a different outer iterate or penalty.
    #[error("stale factorization: built for tag {built}, used with tag {used}")]
    StaleFactorization { built: u64, used: u64 },

    /// Cholesky failed even after jitter.
    #[error("factorization failed for agent {agent}: {reason}")]
    Factorization { agent: usize, reason: String },

    /// NaN or infinity appeared in an update.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A step-size search contracted without making progress.
    #[error("step size stalled: {0}")]
    Stall(String),

    /// Problem generation could not produce a full-rank equality block.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A local subproblem solve did not converge.
    #[error("local solver failed for agent {agent}: {reason}")]
    LocalSolve { agent: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("problem file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SolverError> = std::result::Result<T, E>;
