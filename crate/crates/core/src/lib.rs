// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod baseline;
pub mod error;
pub mod ipm_exact;
pub mod ipm_inexact;
pub mod kkt;
pub mod netsim;
pub mod problem;
pub mod report;
pub mod saddle;

pub use error::{Result, SolverError};
