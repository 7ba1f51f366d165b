//! The spherically constrained classification objective f(W, H) over
//! OB(d,K) x OB(d,N): values, Riemannian derivatives, optimality
//! diagnostics, closed-form solutions and bounds, and collapse metrics.

use nalgebra::{DMatrix, DVector};

use crate::error::{ObncError, Result};
use crate::linalg::{pseudo_inverse, spectral_norm};
use crate::losses::{self, LabelLayout, LossKind, LossSpec};
use crate::manifold::{
    retract, tangent_project, tangent_project_raw, ObliqueMatrix, TangentMatrix,
};
use crate::rng::SplitMix64;

/// Tangency tolerance accepted by the Hessian operations.
pub const HESS_TANGENCY_TOL: f64 = 1e-8;
/// Relative truncation threshold for the between-class scatter pseudo-inverse.
pub const PINV_REL_TOL: f64 = 1e-10;

/// Problem dimensions and loss choice; N = K * n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UfmProblem {
    d: usize,
    layout: LabelLayout,
    spec: LossSpec,
}

impl UfmProblem {
    pub fn new(d: usize, k: usize, n: usize, spec: LossSpec) -> Result<Self> {
        if d < 1 {
            return Err(ObncError::InvalidLayout("need d >= 1".into()));
        }
        Ok(Self {
            d,
            layout: LabelLayout::new(k, n)?,
            spec,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.layout.classes()
    }

    pub fn per_class(&self) -> usize {
        self.layout.per_class()
    }

    pub fn total(&self) -> usize {
        self.layout.total()
    }

    pub fn layout(&self) -> &LabelLayout {
        &self.layout
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn tau(&self) -> f64 {
        self.spec.tau
    }
}

/// A point on OB(d,K) x OB(d,N).
#[derive(Debug, Clone, PartialEq)]
pub struct UfmState {
    w: ObliqueMatrix,
    h: ObliqueMatrix,
}

impl UfmState {
    pub fn new(problem: &UfmProblem, w: ObliqueMatrix, h: ObliqueMatrix) -> Result<Self> {
        if w.nrows() != problem.dim() || w.ncols() != problem.classes() {
            return Err(ObncError::DimensionMismatch {
                expected: format!("W {}x{}", problem.dim(), problem.classes()),
                got: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
        if h.nrows() != problem.dim() || h.ncols() != problem.total() {
            return Err(ObncError::DimensionMismatch {
                expected: format!("H {}x{}", problem.dim(), problem.total()),
                got: format!("{}x{}", h.nrows(), h.ncols()),
            });
        }
        Ok(Self { w, h })
    }

    pub fn classifier(&self) -> &ObliqueMatrix {
        &self.w
    }

    pub fn features(&self) -> &ObliqueMatrix {
        &self.h
    }
}

/// A direction in the product tangent space at some (W, H).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPair {
    pub w: TangentMatrix,
    pub h: TangentMatrix,
}

impl TangentPair {
    pub fn new(state: &UfmState, w: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            w: TangentMatrix::new(state.classifier(), w)?,
            h: TangentMatrix::new(state.features(), h)?,
        })
    }

    pub fn zeros_like(state: &UfmState) -> Self {
        Self {
            w: TangentMatrix::zeros(state.classifier().nrows(), state.classifier().ncols()),
            h: TangentMatrix::zeros(state.features().nrows(), state.features().ncols()),
        }
    }

    /// Builds from components already known to be tangent.
    pub(crate) fn from_raw(w: DMatrix<f64>, h: DMatrix<f64>) -> Self {
        Self {
            w: TangentMatrix::from_raw(w),
            h: TangentMatrix::from_raw(h),
        }
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn norm_squared(&self) -> f64 {
        let nw = self.w.matrix().norm_squared();
        let nh = self.h.matrix().norm_squared();
        nw + nh
    }

    pub fn dot(&self, other: &TangentPair) -> f64 {
        self.w.matrix().dot(other.w.matrix()) + self.h.matrix().dot(other.h.matrix())
    }
}

/// Moves along a tangent pair with the per-column normalization retraction.
pub fn state_retract(state: &UfmState, dir: &TangentPair, t: f64) -> Result<UfmState> {
    Ok(UfmState {
        w: retract(state.classifier(), &dir.w, t)?,
        h: retract(state.features(), &dir.h, t)?,
    })
}

/// Projects an ambient pair onto the tangent space at `state`.
pub fn state_project(state: &UfmState, w: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<TangentPair> {
    Ok(TangentPair {
        w: tangent_project(state.classifier(), w)?,
        h: tangent_project(state.features(), h)?,
    })
}

/// Criticality and globality diagnostics alpha_k = <w_k, H g^k> and
/// beta_i = <h_i, W g_i>.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBeta {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
}

/// Collapse diagnostics. `nc3` is undefined for the supervised-contrastive
/// loss, which has no classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NcMetrics {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: Option<f64>,
}

/// The logit matrix M = tau W^T H.
pub fn logits(problem: &UfmProblem, state: &UfmState) -> DMatrix<f64> {
    state.classifier().matrix().tr_mul(state.features().matrix()) * problem.tau()
}

fn require_logit_loss(problem: &UfmProblem, op: &str) -> Result<()> {
    if problem.spec().kind.is_logit_based() {
        Ok(())
    } else {
        Err(ObncError::UnsupportedDiagnostic(format!(
            "{op} is undefined for the supervised contrastive loss"
        )))
    }
}

/// Loss value and gradient on the logit matrix.
fn logit_value_grad(problem: &UfmProblem, state: &UfmState) -> Result<(f64, DMatrix<f64>)> {
    let m = logits(problem, state);
    losses::value_grad(&problem.spec().kind, &m, problem.layout())
}

/// Objective value at a state.
pub fn f_value(problem: &UfmProblem, state: &UfmState) -> Result<f64> {
    match problem.spec().kind {
        LossKind::SupervisedContrastive => {
            let (v, _) = losses::sc_value_grad(state.features(), problem.layout(), problem.tau())?;
            Ok(v)
        }
        _ => Ok(logit_value_grad(problem, state)?.0),
    }
}

/// Riemannian gradient: tangent projection of the Euclidean gradient.
pub fn riem_grad(problem: &UfmProblem, state: &UfmState) -> Result<TangentPair> {
    match problem.spec().kind {
        LossKind::SupervisedContrastive => {
            let (_, eg) = losses::sc_value_grad(state.features(), problem.layout(), problem.tau())?;
            Ok(TangentPair {
                w: TangentMatrix::zeros(problem.dim(), problem.classes()),
                h: tangent_project(state.features(), &eg)?,
            })
        }
        _ => {
            let (_, g) = logit_value_grad(problem, state)?;
            let tau = problem.tau();
            let egw = state.features().matrix() * g.transpose() * tau;
            let egh = state.classifier().matrix() * &g * tau;
            Ok(TangentPair {
                w: tangent_project(state.classifier(), &egw)?,
                h: tangent_project(state.features(), &egh)?,
            })
        }
    }
}

fn check_direction(state: &UfmState, dir: &TangentPair) -> Result<()> {
    let vw = crate::manifold::tangency_violation(state.classifier(), dir.w.matrix());
    let vh = crate::manifold::tangency_violation(state.features(), dir.h.matrix());
    let violation = vw.max(vh);
    if violation > HESS_TANGENCY_TOL {
        return Err(ObncError::NotTangent { violation });
    }
    Ok(())
}

/// Diagonal of M G^T as a vector (per-classifier-column curvature weights).
fn diag_m_gt(m: &DMatrix<f64>, g: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.nrows(), |k, _| m.row(k).dot(&g.row(k)))
}

/// Diagonal of M^T G (per-feature-column curvature weights).
fn diag_mt_g(m: &DMatrix<f64>, g: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |i, _| m.column(i).dot(&g.column(i)))
}

/// Riemannian Hessian bilinear form along a tangent direction. Cross-entropy
/// only: the Hessian of the head loss is needed in closed form.
pub fn riem_hess_bilinear(problem: &UfmProblem, state: &UfmState, dir: &TangentPair) -> Result<f64> {
    if problem.spec().kind != LossKind::CrossEntropy {
        return Err(ObncError::UnsupportedDiagnostic(
            "Hessian operations are implemented for the cross-entropy loss".into(),
        ));
    }
    check_direction(state, dir)?;
    let tau = problem.tau();
    let m = logits(problem, state);
    let (_, g) = losses::ce_value_grad(&m, problem.layout())?;
    let dw = dir.w.matrix();
    let dh = dir.h.matrix();

    let mdot = (dw.tr_mul(state.features().matrix())
        + state.classifier().matrix().tr_mul(dh))
        * tau;
    let hdot = losses::ce_hess_apply(&m, problem.layout(), &mdot)?;
    let term_gauss = mdot.dot(&hdot);
    let term_cross = 2.0 * tau * g.dot(&(dw.tr_mul(dh)));

    let cw = diag_m_gt(&m, &g);
    let ch = diag_mt_g(&m, &g);
    let mut term_curv = 0.0;
    for k in 0..dw.ncols() {
        term_curv -= cw[k] * dw.column(k).norm_squared();
    }
    for i in 0..dh.ncols() {
        term_curv -= ch[i] * dh.column(i).norm_squared();
    }
    Ok(term_gauss + term_cross + term_curv)
}

/// Riemannian Hessian applied to a tangent direction (cross-entropy only).
pub fn riem_hess_apply(
    problem: &UfmProblem,
    state: &UfmState,
    dir: &TangentPair,
) -> Result<TangentPair> {
    if problem.spec().kind != LossKind::CrossEntropy {
        return Err(ObncError::UnsupportedDiagnostic(
            "Hessian operations are implemented for the cross-entropy loss".into(),
        ));
    }
    check_direction(state, dir)?;
    let tau = problem.tau();
    let w = state.classifier().matrix();
    let h = state.features().matrix();
    let m = logits(problem, state);
    let (_, g) = losses::ce_value_grad(&m, problem.layout())?;
    let dw = dir.w.matrix();
    let dh = dir.h.matrix();

    let mdot = (dw.tr_mul(h) + w.tr_mul(dh)) * tau;
    let dg = losses::ce_hess_apply(&m, problem.layout(), &mdot)?;

    let cw = diag_m_gt(&m, &g);
    let ch = diag_mt_g(&m, &g);

    let mut amb_w = (dh * g.transpose() + h * dg.transpose()) * tau;
    for k in 0..amb_w.ncols() {
        let col = dw.column(k) * cw[k];
        amb_w.column_mut(k).axpy(-1.0, &col, 1.0);
    }
    let mut amb_h = (dw * &g + w * &dg) * tau;
    for i in 0..amb_h.ncols() {
        let col = dh.column(i) * ch[i];
        amb_h.column_mut(i).axpy(-1.0, &col, 1.0);
    }

    Ok(TangentPair {
        w: TangentMatrix::new(
            state.classifier(),
            tangent_project_raw(state.classifier().matrix(), &amb_w),
        )?,
        h: TangentMatrix::new(
            state.features(),
            tangent_project_raw(state.features().matrix(), &amb_h),
        )?,
    })
}

/// alpha/beta diagnostics from the head-loss gradient.
pub fn alpha_beta(problem: &UfmProblem, state: &UfmState) -> Result<AlphaBeta> {
    require_logit_loss(problem, "alpha_beta")?;
    let m = logits(problem, state);
    let (_, g) = losses::value_grad(&problem.spec().kind, &m, problem.layout())?;
    let w = state.classifier().matrix();
    let h = state.features().matrix();
    let hg_t = h * g.transpose();
    let wg = w * &g;
    let alpha = DVector::from_fn(w.ncols(), |k, _| w.column(k).dot(&hg_t.column(k)));
    let beta = DVector::from_fn(h.ncols(), |i, _| h.column(i).dot(&wg.column(i)));
    Ok(AlphaBeta { alpha, beta })
}

/// True iff gradient norms sum below `tol`.
pub fn is_critical(problem: &UfmProblem, state: &UfmState, tol: f64) -> Result<bool> {
    let grad = riem_grad(problem, state)?;
    Ok(grad.w.norm() + grad.h.norm() <= tol)
}

/// Certificate of global optimality at a critical point: every alpha_k at or
/// below -sqrt(n) ||G|| and every beta_i at or below -||G||/sqrt(n), with
/// `tol` slack. Errors if the state is not critical at `tol`.
pub fn global_certificate(problem: &UfmProblem, state: &UfmState, tol: f64) -> Result<bool> {
    require_logit_loss(problem, "global_certificate")?;
    if !is_critical(problem, state, tol)? {
        return Err(ObncError::Precondition(format!(
            "global_certificate requires a critical state (gradient above {tol:.3e})"
        )));
    }
    let m = logits(problem, state);
    let (_, g) = losses::value_grad(&problem.spec().kind, &m, problem.layout())?;
    let sigma = spectral_norm(&g);
    let ab = alpha_beta(problem, state)?;
    let sqrt_n = (problem.per_class() as f64).sqrt();
    let alpha_ok = ab.alpha.iter().all(|&a| a <= -sqrt_n * sigma + tol);
    let beta_ok = ab.beta.iter().all(|&b| b <= -sigma / sqrt_n + tol);
    Ok(alpha_ok && beta_ok)
}

/// The attained infimum of the cross-entropy objective:
/// log(1 + (K-1) exp(-K tau / (K-1))). Overflow-safe for large tau.
pub fn global_lower_bound(k: usize, tau: f64) -> f64 {
    let km1 = (k - 1) as f64;
    ((k as f64 - 1.0) * (-(k as f64) * tau / km1).exp()).ln_1p()
}

/// Label-smoothing value at the collapse configuration:
/// the cross-entropy bound plus alpha tau.
pub fn ls_nc_value(k: usize, tau: f64, alpha: f64) -> f64 {
    global_lower_bound(k, tau) + alpha * tau
}

/// Label-smoothing value at the all-columns-equal configuration, log K,
/// independent of tau.
pub fn ls_constant_value(k: usize) -> f64 {
    (k as f64).ln()
}

/// A sphere-inscribed simplex equiangular tight frame: K unit vectors in R^d
/// with pairwise inner products -1/(K-1), randomly rotated.
pub fn simplex_etf(d: usize, k: usize, seed: u64) -> Result<ObliqueMatrix> {
    if d < k {
        return Err(ObncError::InfeasibleDimensions { d, k });
    }
    let mut rng = SplitMix64::new(seed);
    let gauss = DMatrix::from_fn(d, k, |_, _| rng.next_gaussian());
    let qr = gauss.qr();
    let p = qr.q();
    let scale = (k as f64 / (k as f64 - 1.0)).sqrt();
    let centering =
        DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64);
    ObliqueMatrix::project(p * centering * scale)
}

/// The collapse solution: W a simplex ETF, every feature equal to its
/// class's classifier column.
pub fn nc_solution(problem: &UfmProblem, seed: u64) -> Result<UfmState> {
    let w = simplex_etf(problem.dim(), problem.classes(), seed)?;
    let n = problem.per_class();
    let mut h = DMatrix::zeros(problem.dim(), problem.total());
    for k in 0..problem.classes() {
        for i in 0..n {
            h.set_column(k * n + i, &w.matrix().column(k));
        }
    }
    UfmState::new(problem, w.clone(), ObliqueMatrix::new(h)?)
}

/// Collapse metrics from raw (not necessarily normalized) matrices.
/// `with_classifier` disables NC2/NC3-through-W for the contrastive loss.
pub fn nc_metrics_raw(
    w: &DMatrix<f64>,
    h: &DMatrix<f64>,
    layout: &LabelLayout,
    with_classifier: bool,
) -> NcMetrics {
    let d = h.nrows();
    let k = layout.classes();
    let n = layout.per_class();
    let n_total = layout.total();

    let mut means = DMatrix::zeros(d, k);
    for c in 0..k {
        let mut acc = DVector::zeros(d);
        for i in 0..n {
            acc += h.column(c * n + i);
        }
        means.set_column(c, &(acc / n as f64));
    }
    let global = means.column_sum() / k as f64;

    let mut sigma_w = DMatrix::zeros(d, d);
    for c in 0..k {
        for i in 0..n {
            let diff = h.column(c * n + i) - means.column(c);
            sigma_w.ger(1.0 / n_total as f64, &diff, &diff, 1.0);
        }
    }
    let mut sigma_b = DMatrix::zeros(d, d);
    for c in 0..k {
        let diff = means.column(c) - &global;
        sigma_b.ger(1.0 / k as f64, &diff, &diff, 1.0);
    }
    let nc1 = (sigma_w * pseudo_inverse(&sigma_b, PINV_REL_TOL)).trace() / k as f64;

    let target = etf_gram_target(k);
    let gram_source = if with_classifier {
        w.tr_mul(w)
    } else {
        means.tr_mul(&means)
    };
    let nc2 = gram_distance(&gram_source, &target);
    let nc3 = if with_classifier {
        Some(gram_distance(&w.tr_mul(&means), &target))
    } else {
        None
    };
    NcMetrics { nc1, nc2, nc3 }
}

/// Collapse metrics at a manifold state.
pub fn nc_metrics(problem: &UfmProblem, state: &UfmState) -> NcMetrics {
    nc_metrics_raw(
        state.classifier().matrix(),
        state.features().matrix(),
        problem.layout(),
        problem.spec().kind.is_logit_based(),
    )
}

/// (I - 11^T/K) / sqrt(K-1), the Frobenius-normalized simplex ETF Gram.
fn etf_gram_target(k: usize) -> DMatrix<f64> {
    let scale = 1.0 / ((k as f64) - 1.0).sqrt();
    (DMatrix::identity(k, k) - DMatrix::from_element(k, k, 1.0 / k as f64)) * scale
}

fn gram_distance(a: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let norm = a.norm();
    if norm < 1e-300 {
        // Zero matrix: distance to the unit-norm target.
        return target.norm();
    }
    (a / norm - target).norm()
}

/// Fraction of columns classified correctly by argmax of w_k^T h_i, ties
/// toward the smallest class index.
pub fn train_accuracy_raw(w: &DMatrix<f64>, h: &DMatrix<f64>, layout: &LabelLayout) -> f64 {
    let logits = w.tr_mul(h);
    let mut correct = 0usize;
    for i in 0..logits.ncols() {
        let col = logits.column(i);
        let mut best = 0usize;
        for j in 1..col.len() {
            if col[j] > col[best] {
                best = j;
            }
        }
        if best == layout.class_of(i) {
            correct += 1;
        }
    }
    correct as f64 / logits.ncols() as f64
}

/// Training accuracy at a manifold state (classifier-based losses only).
pub fn train_accuracy(problem: &UfmProblem, state: &UfmState) -> Result<f64> {
    require_logit_loss(problem, "train_accuracy")?;
    Ok(train_accuracy_raw(
        state.classifier().matrix(),
        state.features().matrix(),
        problem.layout(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::random_oblique;

    fn ce_problem(d: usize, k: usize, n: usize, tau: f64) -> UfmProblem {
        UfmProblem::new(d, k, n, LossSpec::ce(tau).unwrap()).unwrap()
    }

    fn random_state(problem: &UfmProblem, seed: u64) -> UfmState {
        UfmState::new(
            problem,
            random_oblique(problem.dim(), problem.classes(), seed),
            random_oblique(problem.dim(), problem.total(), seed ^ 0xABCD),
        )
        .unwrap()
    }

    fn random_tangent(state: &UfmState, seed: u64) -> TangentPair {
        let d = state.classifier().nrows();
        let mut rng = SplitMix64::new(seed);
        let zw = DMatrix::from_fn(d, state.classifier().ncols(), |_, _| rng.next_gaussian());
        let zh = DMatrix::from_fn(d, state.features().ncols(), |_, _| rng.next_gaussian());
        state_project(state, &zw, &zh).unwrap()
    }

    #[test]
    fn etf_two_classes_antipodal() {
        let etf = simplex_etf(4, 2, 3).unwrap();
        let gram = etf.matrix().tr_mul(etf.matrix());
        assert!((gram[(0, 0)] - 1.0).abs() <= 1e-12);
        assert!((gram[(0, 1)] + 1.0).abs() <= 1e-12);
        assert!((gram[(1, 0)] + 1.0).abs() <= 1e-12);
    }

    #[test]
    fn etf_three_classes_gram() {
        let etf = simplex_etf(5, 3, 9).unwrap();
        let gram = etf.matrix().tr_mul(etf.matrix());
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 1.0 } else { -0.5 };
                assert!((gram[(a, b)] - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn etf_columns_sum_to_zero() {
        let etf = simplex_etf(100, 10, 1).unwrap();
        let sum = etf.matrix().column_sum();
        assert!(sum.norm() <= 1e-12);
    }

    #[test]
    fn etf_infeasible_dims() {
        assert!(matches!(
            simplex_etf(9, 10, 0),
            Err(ObncError::InfeasibleDimensions { .. })
        ));
    }

    #[test]
    fn nc_solution_attains_bound() {
        for (k, tau) in [(5usize, 1.0), (10, 1.0), (10, 5.0)] {
            let problem = ce_problem(k + 1, k, 4, tau);
            let state = nc_solution(&problem, 7).unwrap();
            let f = f_value(&problem, &state).unwrap();
            let bound = global_lower_bound(k, tau);
            assert!((f - bound).abs() <= 1e-12, "K={k}, tau={tau}: {f} vs {bound}");
        }
    }

    #[test]
    fn nc_solution_is_critical_and_collapsed() {
        let problem = ce_problem(12, 10, 5, 1.0);
        let state = nc_solution(&problem, 3).unwrap();
        let grad = riem_grad(&problem, &state).unwrap();
        assert!(grad.w.norm() + grad.h.norm() <= 1e-10);
        let m = nc_metrics(&problem, &state);
        assert!(m.nc1.abs() <= 1e-8);
        assert!(m.nc2 <= 1e-8);
        assert!(m.nc3.unwrap() <= 1e-8);
    }

    #[test]
    fn f_value_constant_columns_gives_log_k() {
        let problem = ce_problem(6, 4, 2, 1.0);
        let w = random_oblique(6, 1, 5);
        let col = w.matrix().column(0).clone_owned();
        let mut wm = DMatrix::zeros(6, 4);
        let mut hm = DMatrix::zeros(6, 8);
        for j in 0..4 {
            wm.set_column(j, &col);
        }
        for j in 0..8 {
            hm.set_column(j, &col);
        }
        let state = UfmState::new(
            &problem,
            ObliqueMatrix::new(wm).unwrap(),
            ObliqueMatrix::new(hm).unwrap(),
        )
        .unwrap();
        let f = f_value(&problem, &state).unwrap();
        assert!((f - 4.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn f_value_zero_tau_gives_log_k() {
        let problem = ce_problem(5, 3, 2, 0.0);
        let state = random_state(&problem, 4);
        let f = f_value(&problem, &state).unwrap();
        assert!((f - 3.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn hess_bilinear_zero_direction() {
        let problem = ce_problem(5, 3, 2, 1.0);
        let state = random_state(&problem, 8);
        let zero = TangentPair::zeros_like(&state);
        let v = riem_hess_bilinear(&problem, &state, &zero).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn hess_psd_at_nc_solution() {
        let problem = ce_problem(12, 5, 3, 1.0);
        let state = nc_solution(&problem, 11).unwrap();
        for seed in 0..50u64 {
            let dir = random_tangent(&state, 500 + seed);
            let v = riem_hess_bilinear(&problem, &state, &dir).unwrap();
            assert!(v >= -1e-9, "seed {seed}: {v}");
        }
    }

    #[test]
    fn hess_apply_consistent_with_bilinear() {
        let problem = ce_problem(6, 3, 2, 1.3);
        for seed in 0..20u64 {
            let state = random_state(&problem, 100 + seed);
            let dir = random_tangent(&state, 200 + seed);
            let bilinear = riem_hess_bilinear(&problem, &state, &dir).unwrap();
            let applied = riem_hess_apply(&problem, &state, &dir).unwrap();
            assert!(
                (dir.dot(&applied) - bilinear).abs() <= 1e-10 * bilinear.abs().max(1.0),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn hess_apply_symmetric() {
        let problem = ce_problem(6, 3, 2, 0.9);
        for seed in 0..20u64 {
            let state = random_state(&problem, 300 + seed);
            let d1 = random_tangent(&state, 400 + seed);
            let d2 = random_tangent(&state, 900 + seed);
            let h1 = riem_hess_apply(&problem, &state, &d1).unwrap();
            let h2 = riem_hess_apply(&problem, &state, &d2).unwrap();
            assert!((d1.dot(&h2) - d2.dot(&h1)).abs() <= 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn no_negative_curvature_at_minimum() {
        // Power iteration on -Hess at the collapse solution stays at
        // eigenvalue <= 1e-8.
        let problem = ce_problem(8, 4, 2, 1.0);
        let state = nc_solution(&problem, 2).unwrap();
        let mut v = random_tangent(&state, 77);
        let scale = 1.0 / v.norm();
        v = TangentPair::new(&state, v.w.matrix() * scale, v.h.matrix() * scale).unwrap();
        let mut top = 0.0;
        for _ in 0..100 {
            let hv = riem_hess_apply(&problem, &state, &v).unwrap();
            // -Hess direction
            let neg = TangentPair::new(&state, -hv.w.matrix(), -hv.h.matrix()).unwrap();
            let norm = neg.norm();
            if norm < 1e-14 {
                break;
            }
            top = v.dot(&neg);
            v = TangentPair::new(&state, neg.w.matrix() / norm, neg.h.matrix() / norm).unwrap();
        }
        assert!(top <= 1e-8, "largest -Hess eigenvalue {top}");
    }

    #[test]
    fn alpha_beta_structure_at_nc_solution() {
        let problem = ce_problem(12, 10, 5, 1.0);
        let state = nc_solution(&problem, 5).unwrap();
        let ab = alpha_beta(&problem, &state).unwrap();
        let a0 = ab.alpha[0];
        let b0 = ab.beta[0];
        for &a in ab.alpha.iter() {
            assert!((a - a0).abs() <= 1e-12);
        }
        for &b in ab.beta.iter() {
            assert!((b - b0).abs() <= 1e-12);
        }
        assert!((a0 - 5.0 * b0).abs() <= 1e-12, "alpha = n beta");
        assert!(a0 < 0.0);
    }

    #[test]
    fn alpha_beta_trace_identity() {
        let problem = ce_problem(7, 4, 3, 1.7);
        for seed in 0..10u64 {
            let state = random_state(&problem, seed);
            let ab = alpha_beta(&problem, &state).unwrap();
            assert!((ab.alpha.sum() - ab.beta.sum()).abs() <= 1e-10);
        }
    }

    #[test]
    fn alpha_beta_norm_identity_at_critical_point() {
        let problem = ce_problem(12, 10, 5, 1.0);
        let state = nc_solution(&problem, 21).unwrap();
        let m = logits(&problem, &state);
        let (_, g) = losses::ce_value_grad(&m, problem.layout()).unwrap();
        let ab = alpha_beta(&problem, &state).unwrap();
        let h = state.features().matrix();
        let w = state.classifier().matrix();
        for k in 0..problem.classes() {
            let hgk = h * g.row(k).transpose();
            assert!((ab.alpha[k].abs() - hgk.norm()).abs() <= 1e-12);
        }
        for i in 0..problem.total() {
            let wgi = w * g.column(i);
            assert!((ab.beta[i].abs() - wgi.norm()).abs() <= 1e-12);
        }
    }

    #[test]
    fn alpha_beta_rejects_sc() {
        let problem =
            UfmProblem::new(5, 3, 2, LossSpec::new(LossKind::SupervisedContrastive, 1.0).unwrap())
                .unwrap();
        let state = random_state(&problem, 1);
        assert!(matches!(
            alpha_beta(&problem, &state),
            Err(ObncError::UnsupportedDiagnostic(_))
        ));
    }

    #[test]
    fn criticality_checks() {
        let problem = ce_problem(11, 10, 2, 1.0);
        let state = nc_solution(&problem, 1).unwrap();
        assert!(is_critical(&problem, &state, 1e-8).unwrap());
        for seed in 0..10u64 {
            let state = random_state(&problem, 40 + seed);
            assert!(!is_critical(&problem, &state, 1e-8).unwrap(), "seed {seed}");
        }
    }

    #[test]
    fn certificate_accepts_nc_solution() {
        let problem = ce_problem(12, 10, 5, 1.0);
        let state = nc_solution(&problem, 13).unwrap();
        assert!(global_certificate(&problem, &state, 1e-8).unwrap());
    }

    #[test]
    fn certificate_rejects_non_critical() {
        let problem = ce_problem(12, 10, 5, 1.0);
        let state = nc_solution(&problem, 13).unwrap();
        let mut hm = state.features().matrix().clone();
        let negated = -hm.column(0).clone_owned();
        hm.set_column(0, &negated);
        let perturbed =
            UfmState::new(&problem, state.classifier().clone(), ObliqueMatrix::new(hm).unwrap())
                .unwrap();
        assert!(matches!(
            global_certificate(&problem, &perturbed, 1e-8),
            Err(ObncError::Precondition(_))
        ));
    }

    #[test]
    fn lower_bound_closed_form() {
        assert!((global_lower_bound(5, 0.0) - 5.0f64.ln()).abs() <= 1e-15);
        // Strictly decreasing in tau.
        let mut prev = f64::INFINITY;
        for step in 0..=20 {
            let tau = step as f64 * 0.5;
            let b = global_lower_bound(10, tau);
            assert!(b < prev);
            prev = b;
        }
        // Large tau stays finite and positive.
        let b = global_lower_bound(10, 1e4);
        assert!(b >= 0.0 && b.is_finite());
    }

    #[test]
    fn ls_reference_values() {
        assert!((ls_nc_value(10, 1.0, 0.0) - global_lower_bound(10, 1.0)).abs() <= 1e-15);
        assert!(
            (ls_nc_value(10, 1.0, 0.1) - (global_lower_bound(10, 1.0) + 0.1)).abs() <= 1e-15
        );
        for tau in [0.5, 1.0, 50.0] {
            let _ = tau;
            assert!((ls_constant_value(10) - 10.0f64.ln()).abs() <= 1e-15);
        }
    }

    #[test]
    fn metrics_zero_within_class_scatter() {
        // Features equal their class means, but the means are not an ETF:
        // NC1 = 0 while NC2 > 0.
        let problem = ce_problem(6, 3, 4, 1.0);
        let means = random_oblique(6, 3, 31);
        let mut hm = DMatrix::zeros(6, 12);
        for c in 0..3 {
            for i in 0..4 {
                hm.set_column(c * 4 + i, &means.matrix().column(c));
            }
        }
        let state = UfmState::new(
            &problem,
            random_oblique(6, 3, 32),
            ObliqueMatrix::new(hm).unwrap(),
        )
        .unwrap();
        let m = nc_metrics(&problem, &state);
        assert!(m.nc1.abs() <= 1e-10);
        assert!(m.nc2 > 1e-3);
    }

    #[test]
    fn nc1_matches_direct_dense_recomputation() {
        let problem = ce_problem(8, 5, 4, 1.0);
        let state = random_state(&problem, 71);
        let metrics = nc_metrics(&problem, &state);

        // Independent re-computation of (1/K) trace(Sigma_W pinv(Sigma_B))
        // from scratch.
        let h = state.features().matrix();
        let (k, n, d) = (5usize, 4usize, 8usize);
        let mut means = vec![DVector::zeros(d); k];
        for c in 0..k {
            for i in 0..n {
                means[c] += h.column(c * n + i);
            }
            means[c] /= n as f64;
        }
        let mut global = DVector::zeros(d);
        for c in 0..k {
            global += &means[c];
        }
        global /= k as f64;
        let mut sw = DMatrix::zeros(d, d);
        for c in 0..k {
            for i in 0..n {
                let diff = h.column(c * n + i) - &means[c];
                sw += &diff * diff.transpose() / (k * n) as f64;
            }
        }
        let mut sb = DMatrix::zeros(d, d);
        for c in 0..k {
            let diff = &means[c] - &global;
            sb += &diff * diff.transpose() / k as f64;
        }
        let direct = (sw * pseudo_inverse(&sb, PINV_REL_TOL)).trace() / k as f64;
        assert!((metrics.nc1 - direct).abs() <= 1e-10);
    }

    #[test]
    fn accuracy_at_nc_solution() {
        let problem = ce_problem(12, 10, 3, 1.0);
        let state = nc_solution(&problem, 17).unwrap();
        assert_eq!(train_accuracy(&problem, &state).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_tie_rule_at_equal_classifiers() {
        let problem = ce_problem(6, 4, 2, 1.0);
        let col = random_oblique(6, 1, 51).into_matrix().column(0).clone_owned();
        let mut wm = DMatrix::zeros(6, 4);
        for j in 0..4 {
            wm.set_column(j, &col);
        }
        let state = UfmState::new(
            &problem,
            ObliqueMatrix::new(wm).unwrap(),
            random_oblique(6, 8, 52),
        )
        .unwrap();
        let acc = train_accuracy(&problem, &state).unwrap();
        assert!((acc - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn accuracy_at_negated_features() {
        let problem = ce_problem(12, 10, 3, 1.0);
        let nc = nc_solution(&problem, 17).unwrap();
        let negated = ObliqueMatrix::new(-nc.features().matrix().clone()).unwrap();
        let state = UfmState::new(&problem, nc.classifier().clone(), negated).unwrap();
        let acc = train_accuracy(&problem, &state).unwrap();
        assert_eq!(acc, 0.0);
    }

    #[test]
    fn rotational_invariance() {
        let problem = ce_problem(7, 4, 3, 1.4);
        let state = random_state(&problem, 61);
        let f0 = f_value(&problem, &state).unwrap();
        let m0 = nc_metrics(&problem, &state);
        for seed in 0..5u64 {
            let mut rng = SplitMix64::new(987 + seed);
            let g = DMatrix::from_fn(7, 7, |_, _| rng.next_gaussian());
            let q = g.qr().q();
            let rotated = UfmState::new(
                &problem,
                ObliqueMatrix::project(&q * state.classifier().matrix()).unwrap(),
                ObliqueMatrix::project(&q * state.features().matrix()).unwrap(),
            )
            .unwrap();
            let f1 = f_value(&problem, &rotated).unwrap();
            assert!((f0 - f1).abs() <= 1e-12, "seed {seed}");
            let m1 = nc_metrics(&problem, &rotated);
            assert!((m0.nc1 - m1.nc1).abs() <= 1e-8);
            assert!((m0.nc2 - m1.nc2).abs() <= 1e-10);
        }
    }

    #[test]
    fn perturbing_nc_solution_increases_f() {
        let problem = ce_problem(12, 10, 5, 1.0);
        let state = nc_solution(&problem, 23).unwrap();
        let f0 = f_value(&problem, &state).unwrap();
        for seed in 0..5u64 {
            let dir = random_tangent(&state, 700 + seed);
            let scale = 0.1 / dir.norm();
            let dir =
                TangentPair::new(&state, dir.w.matrix() * scale, dir.h.matrix() * scale).unwrap();
            let moved = state_retract(&state, &dir, 1.0).unwrap();
            let f1 = f_value(&problem, &moved).unwrap();
            assert!(f1 > f0, "seed {seed}: {f1} vs {f0}");
        }
    }

    #[test]
    fn hess_rejects_non_tangent_direction() {
        let problem = ce_problem(5, 3, 2, 1.0);
        let state = random_state(&problem, 19);
        let other = random_state(&problem, 20);
        let dir = random_tangent(&other, 21);
        assert!(matches!(
            riem_hess_bilinear(&problem, &state, &dir),
            Err(ObncError::NotTangent { .. })
        ));
    }
}
