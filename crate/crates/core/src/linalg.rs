//! Small dense linear-algebra helpers: deterministic power iteration for
//! spectral norms and singular pairs, sorted symmetric eigendecompositions,
//! and a truncated pseudo-inverse.

use nalgebra::{DMatrix, DVector};

use crate::rng::SplitMix64;

const POWER_MAX_ITERS: usize = 50;
const POWER_REL_TOL: f64 = 1e-10;

fn seeded_unit_vector(len: usize, seed: u64) -> DVector<f64> {
    let mut rng = SplitMix64::new(seed);
    loop {
        let v = DVector::from_fn(len, |_, _| rng.next_gaussian());
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Spectral norm of A by power iteration on the smaller Gram matrix,
/// started from a fixed-seed vector: 50 iterations or 1e-10 relative change.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    let gram = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    let mut v = seeded_unit_vector(gram.nrows(), 0x5EED_0001);
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= POWER_REL_TOL * next.abs().max(1e-300) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// Leading singular triple (sigma, u, v) of A, via power iteration on the
/// Gram matrix followed by one matrix-vector solve for the other factor.
/// `sigma` is reported as u^T A v of the returned vectors, so the triple is
/// internally consistent even before full convergence.
pub fn top_singular_pair(a: &DMatrix<f64>) -> (f64, DVector<f64>, DVector<f64>) {
    let tall = a.nrows() >= a.ncols();
    let gram = if tall {
        a.transpose() * a
    } else {
        a * a.transpose()
    };
    let mut x = seeded_unit_vector(gram.nrows(), 0x5EED_0002);
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w = &gram * &x;
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        let next = x.dot(&w);
        x = w / norm;
        if (next - lambda).abs() <= 1e-15 * next.abs().max(1e-300) {
            break;
        }
        lambda = next;
    }
    let (u, v) = if tall {
        let v = x;
        let mut u = a * &v;
        let un = u.norm();
        if un > 0.0 {
            u /= un;
        }
        (u, v)
    } else {
        let u = x;
        let mut v = a.transpose() * &u;
        let vn = v.norm();
        if vn > 0.0 {
            v /= vn;
        }
        (u, v)
    };
    let sigma = u.dot(&(a * &v));
    (sigma, u, v)
}

/// Eigenpairs of a symmetric matrix sorted by ascending eigenvalue.
pub fn symmetric_eigen_sorted(a: &DMatrix<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).clone_owned())
        .collect();
    (values, vectors)
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `rel_tol * sigma_max` truncated.
pub fn pseudo_inverse(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if sigma_max == 0.0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    svd.pseudo_inverse(rel_tol * sigma_max)
        .expect("svd computed with both factors")
}
