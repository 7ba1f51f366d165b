//! Exact non-global critical points of the cross-entropy objective and the
//! negative-curvature directions certifying them as strict saddles.

use nalgebra::{DMatrix, DVector};

use crate::error::{ObncError, Result};
use crate::linalg::{symmetric_eigen_sorted, top_singular_pair};
use crate::losses::{self, LossKind};
use crate::manifold::{random_oblique, tangent_project_raw, ObliqueMatrix};
use crate::ufm::{
    alpha_beta, global_certificate, is_critical, logits, riem_hess_bilinear, TangentPair,
    UfmProblem, UfmState,
};

/// |beta_i| at or below this counts as a vanishing diagnostic.
pub const BETA_ZERO_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaddleCase {
    /// Rank-one classifier W = w 1_K^T, all beta vanish.
    RankOneW,
    /// All beta nonzero; escape through the top singular pair of the
    /// head-loss gradient.
    FullBeta,
}

/// A certified negative-curvature direction at a critical point.
#[derive(Debug, Clone)]
pub struct SaddleCertificate {
    pub case: SaddleCase,
    pub direction: TangentPair,
    pub hess_value: f64,
    pub tau_bound: f64,
}

/// The landscape theorem's temperature ceiling
/// 2 (d - 2) (1 + (K mod 2)/K)^{-1}.
pub fn tau_bound(d: usize, k: usize) -> f64 {
    2.0 * (d as f64 - 2.0) / (1.0 + (k % 2) as f64 / k as f64)
}

fn require_ce(problem: &UfmProblem, op: &str) -> Result<()> {
    if problem.spec().kind == LossKind::CrossEntropy {
        Ok(())
    } else {
        Err(ObncError::UnsupportedDiagnostic(format!(
            "{op} is defined for the cross-entropy loss"
        )))
    }
}

/// The rank-one critical point: W = w 1_K^T and H = w 1_N^T for a random
/// unit vector w. Carries f = log K with vanishing alpha and beta.
pub fn rank_one_saddle(problem: &UfmProblem, seed: u64) -> Result<UfmState> {
    require_ce(problem, "rank_one_saddle")?;
    let w = random_oblique(problem.dim(), 1, seed);
    let col = w.matrix().column(0).clone_owned();
    let mut wm = DMatrix::zeros(problem.dim(), problem.classes());
    for j in 0..problem.classes() {
        wm.set_column(j, &col);
    }
    let mut hm = DMatrix::zeros(problem.dim(), problem.total());
    for j in 0..problem.total() {
        hm.set_column(j, &col);
    }
    UfmState::new(problem, ObliqueMatrix::new(wm)?, ObliqueMatrix::new(hm)?)
}

/// A closed-form critical point that is not global and has every beta
/// nonzero: the classifier is a simplex ETF while every feature sits at the
/// antipode of its class column. Used to exercise the full-beta escape case.
pub fn antipodal_critical_point(problem: &UfmProblem, seed: u64) -> Result<UfmState> {
    require_ce(problem, "antipodal_critical_point")?;
    let nc = crate::ufm::nc_solution(problem, seed)?;
    let negated = ObliqueMatrix::new(-nc.features().matrix().clone())?;
    UfmState::new(problem, nc.classifier().clone(), negated)
}

/// Unit vector in the span of the two smallest eigenvectors of H H^T,
/// orthogonal to w.
fn small_curvature_direction(h: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    let gram = h * h.transpose();
    let (_, vecs) = symmetric_eigen_sorted(&gram);
    let v0 = &vecs[0];
    let v1 = &vecs[1];
    let c0 = w.dot(v0);
    let c1 = w.dot(v1);
    let mut a = v0 * c1 - v1 * c0;
    if a.norm() < 1e-12 {
        a = v0.clone();
    }
    // Re-orthogonalize against w and normalize.
    let proj = w.dot(&a);
    a -= w * proj;
    let norm = a.norm();
    a /= norm;
    a
}

/// Escape direction at a rank-one critical point (some beta vanishing):
/// Delta_W = a u^T with alternating-sign u and a of low feature curvature,
/// Delta_H the tangent projection of the same pattern.
pub fn escape_direction_case1(problem: &UfmProblem, state: &UfmState) -> Result<SaddleCertificate> {
    require_ce(problem, "escape_direction_case1")?;
    let ab = alpha_beta(problem, state)?;
    let min_beta = ab.beta.iter().map(|b| b.abs()).fold(f64::INFINITY, f64::min);
    if min_beta > BETA_ZERO_TOL {
        return Err(ObncError::WrongCase(format!(
            "all beta are nonzero (min |beta| = {min_beta:.3e}); use the full-beta case"
        )));
    }

    let d = problem.dim();
    let k = problem.classes();
    let n_total = problem.total() as f64;
    let tau = problem.tau();
    let bound = tau_bound(d, k);

    // With beta vanishing the classifier is rank one; its shared column.
    let wm = state.classifier().matrix();
    let mut w_col = DVector::zeros(d);
    for j in 0..k {
        w_col += wm.column(j);
    }
    let norm = w_col.norm();
    if norm < 1e-12 {
        return Err(ObncError::WrongCase(
            "classifier columns cancel; not a rank-one critical point".into(),
        ));
    }
    w_col /= norm;

    let hm = state.features().matrix();
    let a = small_curvature_direction(hm, &w_col);
    let parity = (k % 2) as f64;
    let u = DVector::from_fn(k, |j, _| if j % 2 == 0 { 1.0 } else { -1.0 });

    let dw_raw = &a * u.transpose();
    let dw = tangent_project_raw(wm, &dw_raw);
    let mut dh = DMatrix::zeros(d, problem.total());
    for j in 0..problem.total() {
        let uk = u[problem.layout().class_of(j)];
        let hj = hm.column(j).clone_owned();
        let mut col = &a * uk;
        let dot = hj.dot(&col);
        col.axpy(-dot, &hj, 1.0);
        dh.set_column(j, &col);
    }

    let direction = TangentPair::new(state, dw, dh)?;
    let hess_value = riem_hess_bilinear(problem, state, &direction)?;

    let ha_sq = (hm.transpose() * &a).norm_squared();
    let gamma_cap = 2.0 * n_total / (tau * (1.0 + parity / k as f64) + 2.0);
    if tau >= bound {
        return Err(ObncError::HypothesisViolated {
            tau,
            bound,
            hess_value,
        });
    }
    if ha_sq >= gamma_cap {
        return Err(ObncError::InternalConsistency(format!(
            "||H^T a||^2 = {ha_sq:.6e} not below {gamma_cap:.6e} despite tau < bound"
        )));
    }
    if hess_value >= 0.0 {
        return Err(ObncError::InternalConsistency(format!(
            "rank-one escape direction has nonnegative curvature {hess_value:.6e}"
        )));
    }
    Ok(SaddleCertificate {
        case: SaddleCase::RankOneW,
        direction,
        hess_value,
        tau_bound: bound,
    })
}

/// Escape direction at a critical, non-global point with all beta nonzero:
/// a rank-one direction built from a classifier null vector and the top
/// singular pair of the head-loss gradient.
pub fn escape_direction_case2(problem: &UfmProblem, state: &UfmState) -> Result<SaddleCertificate> {
    require_ce(problem, "escape_direction_case2")?;
    let ab = alpha_beta(problem, state)?;
    let min_beta = ab.beta.iter().map(|b| b.abs()).fold(f64::INFINITY, f64::min);
    if min_beta <= BETA_ZERO_TOL {
        return Err(ObncError::WrongCase(format!(
            "some beta vanishes (min |beta| = {min_beta:.3e}); use the rank-one case"
        )));
    }
    if global_certificate(problem, state, BETA_ZERO_TOL)? {
        return Err(ObncError::NoEscape(
            "state satisfies the global-optimality certificate".into(),
        ));
    }
    let d = problem.dim();
    let k = problem.classes();
    if d <= k {
        return Err(ObncError::InfeasibleDimensions { d, k });
    }

    let wm = state.classifier().matrix();
    let gram = wm * wm.transpose();
    let (_, vecs) = symmetric_eigen_sorted(&gram);
    let a = vecs[0].clone();
    let w_residual = (wm.transpose() * &a).norm();
    if w_residual > 1e-8 {
        return Err(ObncError::InternalConsistency(format!(
            "no classifier null direction found (residual {w_residual:.3e})"
        )));
    }

    let m = logits(problem, state);
    let (_, g) = losses::ce_value_grad(&m, problem.layout())?;
    let (sigma, u1, v1) = top_singular_pair(&g);

    let n = problem.per_class() as f64;
    let tau = problem.tau();
    let root4 = n.powf(0.25);
    let u = -&u1 / root4;
    let v = &v1 * root4;

    let dw = tangent_project_raw(wm, &(&a * u.transpose()));
    let dh = tangent_project_raw(state.features().matrix(), &(&a * v.transpose()));
    let direction = TangentPair::new(state, dw, dh)?;

    let sqrt_n = n.sqrt();
    let mut hess_value = -2.0 * tau * sigma;
    for j in 0..k {
        hess_value -= tau * ab.alpha[j] * u1[j] * u1[j] / sqrt_n;
    }
    for i in 0..problem.total() {
        hess_value -= tau * ab.beta[i] * sqrt_n * v1[i] * v1[i];
    }
    if hess_value >= 0.0 {
        return Err(ObncError::InternalConsistency(format!(
            "full-beta escape direction has nonnegative curvature {hess_value:.6e}"
        )));
    }
    Ok(SaddleCertificate {
        case: SaddleCase::FullBeta,
        direction,
        hess_value,
        tau_bound: tau_bound(d, k),
    })
}

/// Certifies a critical, non-global point as a strict saddle, dispatching on
/// whether any beta vanishes.
pub fn certify_strict_saddle(
    problem: &UfmProblem,
    state: &UfmState,
    tol: f64,
) -> Result<SaddleCertificate> {
    require_ce(problem, "certify_strict_saddle")?;
    if !is_critical(problem, state, tol)? {
        return Err(ObncError::Precondition(format!(
            "certify_strict_saddle requires a critical state (gradient above {tol:.3e})"
        )));
    }
    if global_certificate(problem, state, tol)? {
        return Err(ObncError::Precondition(
            "state is globally optimal; no negative curvature exists".into(),
        ));
    }
    let ab = alpha_beta(problem, state)?;
    let min_beta = ab.beta.iter().map(|b| b.abs()).fold(f64::INFINITY, f64::min);
    if min_beta <= tol.max(BETA_ZERO_TOL) {
        escape_direction_case1(problem, state)
    } else {
        escape_direction_case2(problem, state)
    }
}
