//! Riemannian optimization of spherically constrained classification losses
//! over products of unit spheres, with neural-collapse diagnostics,
//! global-optimality certificates, and strict-saddle escape directions.

pub mod error;
pub mod linalg;
pub mod losses;
pub mod manifold;
pub mod rng;
pub mod saddle;
pub mod solvers;
pub mod ufm;

pub use error::{ObncError, Result};
pub use losses::{LabelLayout, LossKind, LossSpec};
pub use manifold::{random_oblique, retract, tangent_project, ObliqueMatrix, TangentMatrix};
pub use ufm::{
    alpha_beta, f_value, global_certificate, global_lower_bound, is_critical, logits,
    ls_constant_value, ls_nc_value, nc_metrics, nc_solution, riem_grad, riem_hess_apply,
    riem_hess_bilinear, simplex_etf, state_project, state_retract, train_accuracy, AlphaBeta,
    NcMetrics, TangentPair, UfmProblem, UfmState,
};
