//! Learning nonnegative mixing weights of a linear combination of fixed base
//! kernels, under one roof for the whole family of objectives that arise from
//! regularised risk and Gaussian-process evidence criteria:
//!
//! * `phi_MKL` — regularised risk with a p-norm penalty on the weights,
//! * `phi_MAP` — joint posterior maximisation with the `ln|K_theta|` Occam term,
//! * `phi_GAU` — the exact Gaussian-noise negative log marginal likelihood,
//! * `phi_MAP/GAU`, `phi_RR` — Gaussian-case variants,
//! * `psi_VB` — a variational upper bound on the negative log evidence built
//!   from scaled-Gaussian site bounds, in both width (`gamma`) and marginal
//!   variance (`z`) parametrisations.
//!
//! All of them are minimised by one double-loop method ([`solver::fit`]):
//! tangent refits of the concave log-determinant term alternate with joint
//! Newton steps on the convexified criterion, with a log-barrier keeping the
//! weights in the positive orthant.
//!
//! The [`oracle`] module holds brute-force validators (quadrature, importance
//! sampling, grids, finite differences) used only by tests and the taxonomy
//! checker, never by the production solver.

// `!(x > 0.0)` rejects NaN as well as nonpositive values; keep it.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kernel;
pub mod likelihood;
pub mod objective;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result};
pub use kernel::{
    assemble_gram, build_base_kernels, posterior_mean_predict, trace_products, BaseKernelSet,
    GramFactor, KernelFunctionSpec, ThetaVector, DEFAULT_JITTER,
};
pub use likelihood::{LikelihoodModel, SiteBound};
pub use objective::{InnerState, ObjectiveKind, ObjectiveSpec, VariationalState};
pub use oracle::{OracleEstimate, OracleMethod};
pub use solver::{fit, fit_from, ConvergenceTrace, FitResult, FitStatus, SolverConfig};
