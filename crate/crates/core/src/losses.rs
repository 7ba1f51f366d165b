//! Head losses on the logit matrix M (and the supervised-contrastive loss on
//! the features directly): values, analytic gradients, and Hessian-direction
//! products for cross-entropy.
//!
//! All values carry the 1/N normalization; solvers never re-normalize.

use nalgebra::{DMatrix, DVector};

use crate::error::{ObncError, Result};
use crate::manifold::ObliqueMatrix;

/// Balanced block layout [H_1 .. H_K]: column i belongs to class i / n.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelLayout {
    k: usize,
    n: usize,
}

impl LabelLayout {
    pub fn new(k: usize, n: usize) -> Result<Self> {
        if k < 2 || n < 1 {
            return Err(ObncError::InvalidLayout(format!(
                "need K >= 2 and n >= 1, got K = {k}, n = {n}"
            )));
        }
        Ok(Self { k, n })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn per_class(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> usize {
        self.k * self.n
    }

    /// Class of column i (0-indexed).
    pub fn class_of(&self, i: usize) -> usize {
        i / self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
    LabelSmoothing { alpha: f64 },
    SupervisedContrastive,
}

impl LossKind {
    /// True for losses defined through the logit matrix M = tau W^T H.
    pub fn is_logit_based(&self) -> bool {
        !matches!(self, LossKind::SupervisedContrastive)
    }
}

/// Loss family plus the temperature scaling the logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub tau: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(ObncError::InvalidLayout(format!("tau must be >= 0, got {tau}")));
        }
        match kind {
            LossKind::Focal { gamma } if !(gamma >= 0.0) => {
                return Err(ObncError::InvalidLayout(format!(
                    "focal gamma must be >= 0, got {gamma}"
                )));
            }
            LossKind::LabelSmoothing { alpha } if !(0.0..=1.0).contains(&alpha) => {
                return Err(ObncError::InvalidLayout(format!(
                    "smoothing alpha must be in [0, 1], got {alpha}"
                )));
            }
            _ => {}
        }
        Ok(Self { kind, tau })
    }

    pub fn ce(tau: f64) -> Result<Self> {
        Self::new(LossKind::CrossEntropy, tau)
    }
}

/// Softmax with per-entry max subtraction.
pub fn softmax(z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(ObncError::NonFiniteInput { op: "softmax" });
    }
    let max = z.max();
    let mut out = z.map(|v| (v - max).exp());
    let sum: f64 = out.iter().sum();
    out.scale_mut(1.0 / sum);
    Ok(out)
}

fn check_logits(m: &DMatrix<f64>, layout: &LabelLayout) -> Result<()> {
    if m.nrows() != layout.classes() || m.ncols() != layout.total() {
        return Err(ObncError::DimensionMismatch {
            expected: format!("{}x{}", layout.classes(), layout.total()),
            got: format!("{}x{}", m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

/// Softmax of a column plus its log-sum-exp, both max-subtracted.
fn column_softmax(col: nalgebra::DVectorView<f64>) -> (DVector<f64>, f64) {
    let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = DVector::from_iterator(col.len(), col.iter().map(|&v| (v - max).exp()));
    let sum: f64 = p.iter().sum();
    p.scale_mut(1.0 / sum);
    (p, max + sum.ln())
}

/// Cross-entropy value and gradient on M.
pub fn ce_value_grad(m: &DMatrix<f64>, layout: &LabelLayout) -> Result<(f64, DMatrix<f64>)> {
    check_logits(m, layout)?;
    let n_total = layout.total() as f64;
    let mut grad = DMatrix::zeros(m.nrows(), m.ncols());
    let mut value = 0.0;
    for i in 0..m.ncols() {
        let (p, lse) = column_softmax(m.column(i));
        let class = layout.class_of(i);
        value += lse - m[(class, i)];
        let mut g = grad.column_mut(i);
        g.copy_from(&p);
        g[class] -= 1.0;
        g.scale_mut(1.0 / n_total);
    }
    Ok((value / n_total, grad))
}

/// Cross-entropy Hessian applied to a direction D, column by column:
/// (diag(eta) - eta eta^T) d / N.
pub fn ce_hess_apply(
    m: &DMatrix<f64>,
    layout: &LabelLayout,
    d: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_logits(m, layout)?;
    check_logits(d, layout)?;
    let n_total = layout.total() as f64;
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.ncols() {
        let (p, _) = column_softmax(m.column(i));
        let di = d.column(i);
        let pd = p.dot(&di);
        let mut o = out.column_mut(i);
        for j in 0..p.len() {
            o[j] = p[j] * (di[j] - pd) / n_total;
        }
    }
    Ok(out)
}

/// Focal loss value and gradient; gamma = 0 reproduces cross-entropy exactly.
pub fn focal_value_grad(
    m: &DMatrix<f64>,
    layout: &LabelLayout,
    gamma: f64,
) -> Result<(f64, DMatrix<f64>)> {
    check_logits(m, layout)?;
    let n_total = layout.total() as f64;
    let mut grad = DMatrix::zeros(m.nrows(), m.ncols());
    let mut value = 0.0;
    for i in 0..m.ncols() {
        let (p, lse) = column_softmax(m.column(i));
        let class = layout.class_of(i);
        let log_pk = m[(class, i)] - lse;
        let pk = log_pk.exp();
        let q = 1.0 - pk;
        value += -q.powf(gamma) * log_pk;
        // s = gamma pk q^(gamma-1) log pk - q^gamma; at pk -> 1 both terms
        // vanish like q^gamma for gamma > 0.
        let s = if q <= 0.0 {
            if gamma == 0.0 {
                -1.0
            } else {
                0.0
            }
        } else {
            gamma * pk * q.powf(gamma - 1.0) * log_pk - q.powf(gamma)
        };
        let mut g = grad.column_mut(i);
        for j in 0..p.len() {
            let ind = if j == class { 1.0 } else { 0.0 };
            g[j] = s * (ind - p[j]) / n_total;
        }
    }
    Ok((value / n_total, grad))
}

/// Label-smoothing value and gradient; alpha = 0 reproduces cross-entropy.
pub fn label_smoothing_value_grad(
    m: &DMatrix<f64>,
    layout: &LabelLayout,
    alpha: f64,
) -> Result<(f64, DMatrix<f64>)> {
    check_logits(m, layout)?;
    let k = layout.classes() as f64;
    let n_total = layout.total() as f64;
    let on_target = 1.0 - (k - 1.0) * alpha / k;
    let off_target = alpha / k;
    let mut grad = DMatrix::zeros(m.nrows(), m.ncols());
    let mut value = 0.0;
    for i in 0..m.ncols() {
        let (p, lse) = column_softmax(m.column(i));
        let class = layout.class_of(i);
        let mut weighted = 0.0;
        for j in 0..m.nrows() {
            let t = if j == class { on_target } else { off_target };
            weighted += t * m[(j, i)];
        }
        value += lse - weighted;
        let mut g = grad.column_mut(i);
        for j in 0..p.len() {
            let t = if j == class { on_target } else { off_target };
            g[j] = (p[j] - t) / n_total;
        }
    }
    Ok((value / n_total, grad))
}

/// Value and gradient for the logit-based loss named by `kind`.
pub fn value_grad(
    kind: &LossKind,
    m: &DMatrix<f64>,
    layout: &LabelLayout,
) -> Result<(f64, DMatrix<f64>)> {
    match *kind {
        LossKind::CrossEntropy => ce_value_grad(m, layout),
        LossKind::Focal { gamma } => focal_value_grad(m, layout, gamma),
        LossKind::LabelSmoothing { alpha } => label_smoothing_value_grad(m, layout, alpha),
        LossKind::SupervisedContrastive => Err(ObncError::UnsupportedDiagnostic(
            "supervised contrastive loss is not logit-based".into(),
        )),
    }
}

/// Supervised contrastive loss over the whole dataset, with its Euclidean
/// gradient in the features.
pub fn sc_value_grad(
    h: &ObliqueMatrix,
    layout: &LabelLayout,
    tau: f64,
) -> Result<(f64, DMatrix<f64>)> {
    if layout.per_class() < 2 {
        return Err(ObncError::InvalidLayout(
            "supervised contrastive loss needs n >= 2".into(),
        ));
    }
    if h.ncols() != layout.total() {
        return Err(ObncError::DimensionMismatch {
            expected: format!("d x {}", layout.total()),
            got: format!("{}x{}", h.nrows(), h.ncols()),
        });
    }
    let n_total = layout.total();
    let n = layout.per_class();
    let s = tau * tau;
    let hm = h.matrix();
    let sims = hm.transpose() * hm;

    // q[i][l]: softmax over l != i of s * <h_i, h_l>.
    let mut q = DMatrix::zeros(n_total, n_total);
    let mut lse = vec![0.0; n_total];
    for i in 0..n_total {
        let mut max = f64::NEG_INFINITY;
        for l in 0..n_total {
            if l != i {
                max = max.max(s * sims[(l, i)]);
            }
        }
        let mut sum = 0.0;
        for l in 0..n_total {
            if l != i {
                let e = (s * sims[(l, i)] - max).exp();
                q[(l, i)] = e;
                sum += e;
            }
        }
        for l in 0..n_total {
            q[(l, i)] /= sum;
        }
        lse[i] = max + sum.ln();
    }

    let coeff = 1.0 / (n_total as f64 * (n - 1) as f64);
    let mut value = 0.0;
    for i in 0..n_total {
        let ci = layout.class_of(i);
        for j in 0..n_total {
            if j != i && layout.class_of(j) == ci {
                value -= s * sims[(j, i)] - lse[i];
            }
        }
    }
    value *= coeff;

    // grad_{h_m} = -coeff s [2 sum_{j in P(m)} h_j
    //                        - (n-1) sum_{l != m} (q_{ml} + q_{lm}) h_l].
    let mut weights = DMatrix::zeros(n_total, n_total);
    for m_idx in 0..n_total {
        let cm = layout.class_of(m_idx);
        for l in 0..n_total {
            if l == m_idx {
                continue;
            }
            let mut w = -(n as f64 - 1.0) * (q[(l, m_idx)] + q[(m_idx, l)]);
            if layout.class_of(l) == cm {
                w += 2.0;
            }
            weights[(l, m_idx)] = -coeff * s * w;
        }
    }
    let grad = hm * weights;
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::random_oblique;
    use nalgebra::dvector;

    fn layout(k: usize, n: usize) -> LabelLayout {
        LabelLayout::new(k, n).unwrap()
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let p = softmax(&dvector![0.0, 0.0, 0.0, 0.0]).unwrap();
        for v in p.iter() {
            assert!((v - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        for t in [-3.0, 0.5, 1e4] {
            let p = softmax(&dvector![t, t, t]).unwrap();
            for v in p.iter() {
                assert!((v - 1.0 / 3.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&dvector![1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() <= 1e-12);
        assert!(p[1].abs() <= 1e-12);
        assert!((p.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&dvector![f64::NAN, 0.0]).is_err());
        assert!(softmax(&dvector![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn ce_at_zero_logits() {
        let lay = layout(3, 2);
        let m = DMatrix::zeros(3, 6);
        let (v, g) = ce_value_grad(&m, &lay).unwrap();
        assert!((v - 3.0f64.ln()).abs() <= 1e-15);
        let n_total = 6.0;
        for i in 0..6 {
            let class = lay.class_of(i);
            for j in 0..3 {
                let expect = ((1.0 / 3.0) - if j == class { 1.0 } else { 0.0 }) / n_total;
                assert!((g[(j, i)] - expect).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn ce_grad_columns_sum_to_zero() {
        let lay = layout(4, 3);
        let m = random_oblique(4, 12, 5).into_matrix() * 2.5;
        let (_, g) = ce_value_grad(&m, &lay).unwrap();
        for i in 0..12 {
            assert!(g.column(i).sum().abs() <= 1e-12);
        }
    }

    #[test]
    fn ce_hess_matches_closed_form_at_zero() {
        let lay = layout(4, 2);
        let m = DMatrix::zeros(4, 8);
        let d = random_oblique(4, 8, 3).into_matrix();
        let out = ce_hess_apply(&m, &lay, &d).unwrap();
        let k = 4.0;
        let n_total = 8.0;
        for i in 0..8 {
            let di = d.column(i);
            let mean = di.sum() / k;
            for j in 0..4 {
                let expect = (di[j] - mean) / (k * n_total);
                assert!((out[(j, i)] - expect).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn ce_hess_kills_constant_columns() {
        let lay = layout(3, 2);
        let m = random_oblique(3, 6, 9).into_matrix();
        let ones = DMatrix::from_element(3, 6, 1.0);
        let mut d = ones.clone();
        for i in 0..6 {
            d.column_mut(i).scale_mut(1.3 * (i as f64 + 1.0));
        }
        let out = ce_hess_apply(&m, &lay, &d).unwrap();
        assert!(out.norm() <= 1e-14);
    }

    #[test]
    fn ce_hess_columns_orthogonal_to_ones() {
        let lay = layout(5, 2);
        let m = random_oblique(5, 10, 17).into_matrix() * 3.0;
        let d = random_oblique(5, 10, 18).into_matrix();
        let out = ce_hess_apply(&m, &lay, &d).unwrap();
        for i in 0..10 {
            assert!(out.column(i).sum().abs() <= 1e-12);
        }
    }

    #[test]
    fn ce_hess_symmetric_operator() {
        let lay = layout(4, 3);
        let m = random_oblique(4, 12, 31).into_matrix() * 2.0;
        let d1 = random_oblique(4, 12, 32).into_matrix();
        let d2 = random_oblique(4, 12, 33).into_matrix();
        let h1 = ce_hess_apply(&m, &lay, &d1).unwrap();
        let h2 = ce_hess_apply(&m, &lay, &d2).unwrap();
        assert!((d1.dot(&h2) - d2.dot(&h1)).abs() <= 1e-10);
    }

    #[test]
    fn focal_gamma_zero_is_ce() {
        let lay = layout(3, 2);
        for seed in 0..20u64 {
            let m = random_oblique(3, 6, seed).into_matrix() * 1.7;
            let (vc, gc) = ce_value_grad(&m, &lay).unwrap();
            let (vf, gf) = focal_value_grad(&m, &lay, 0.0).unwrap();
            assert!((vc - vf).abs() <= 1e-14);
            assert!((gc - gf).norm() <= 1e-14);
        }
    }

    #[test]
    fn focal_at_zero_logits() {
        let lay = layout(5, 2);
        let m = DMatrix::zeros(5, 10);
        let gamma = 2.0;
        let (v, _) = focal_value_grad(&m, &lay, gamma).unwrap();
        let expect = (1.0 - 1.0 / 5.0f64).powf(gamma) * 5.0f64.ln();
        assert!((v - expect).abs() <= 1e-14);
    }

    #[test]
    fn focal_extreme_confidence_is_finite() {
        let lay = layout(2, 1);
        // Correct logit overwhelmingly large: p_k == 1 in f64.
        let m = DMatrix::from_column_slice(2, 2, &[800.0, -800.0, -800.0, 800.0]);
        let (v, g) = focal_value_grad(&m, &lay, 3.0).unwrap();
        assert!(v.is_finite() && v >= 0.0);
        assert!(g.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn label_smoothing_alpha_zero_is_ce() {
        let lay = layout(4, 2);
        for seed in 0..20u64 {
            let m = random_oblique(4, 8, seed).into_matrix() * 2.1;
            let (vc, gc) = ce_value_grad(&m, &lay).unwrap();
            let (vl, gl) = label_smoothing_value_grad(&m, &lay, 0.0).unwrap();
            assert!((vc - vl).abs() <= 1e-14);
            assert!((gc - gl).norm() <= 1e-14);
        }
    }

    #[test]
    fn label_smoothing_at_zero_logits() {
        let lay = layout(6, 3);
        let m = DMatrix::zeros(6, 18);
        for alpha in [0.0, 0.1, 0.5, 1.0] {
            let (v, _) = label_smoothing_value_grad(&m, &lay, alpha).unwrap();
            assert!((v - 6.0f64.ln()).abs() <= 1e-14, "alpha {alpha}");
        }
    }

    #[test]
    fn sc_small_tau_limit() {
        let lay = layout(3, 3);
        let h = random_oblique(4, 9, 12);
        let (v, _) = sc_value_grad(&h, &lay, 1e-8).unwrap();
        assert!((v - 8.0f64.ln()).abs() <= 1e-8);
    }

    #[test]
    fn sc_rejects_single_sample_classes() {
        let lay = layout(3, 1);
        let h = random_oblique(4, 3, 1);
        assert!(matches!(
            sc_value_grad(&h, &lay, 1.0),
            Err(ObncError::InvalidLayout(_))
        ));
    }

    #[test]
    fn losses_nonnegative_and_finite() {
        let lay = layout(3, 2);
        for seed in 0..10u64 {
            let m = random_oblique(3, 6, seed).into_matrix() * 4.0;
            let (vc, _) = ce_value_grad(&m, &lay).unwrap();
            let (vf, _) = focal_value_grad(&m, &lay, 3.0).unwrap();
            let (vl, _) = label_smoothing_value_grad(&m, &lay, 0.2).unwrap();
            for v in [vc, vf, vl] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let lay = layout(3, 2);
        let m = DMatrix::zeros(3, 5);
        assert!(ce_value_grad(&m, &lay).is_err());
        let good = DMatrix::zeros(3, 6);
        let bad_d = DMatrix::zeros(3, 5);
        assert!(ce_hess_apply(&good, &lay, &bad_d).is_err());
    }
}
