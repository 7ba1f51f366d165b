//! Oblique-manifold primitives: points with unit-norm columns, tangent
//! projection, metric-projection retraction, and seeded random points.

use nalgebra::DMatrix;

use crate::error::{ObncError, Result};
use crate::rng::SplitMix64;

/// Tolerance on column norms for manifold membership.
pub const MEMBERSHIP_TOL: f64 = 1e-12;
/// Tolerance on per-column inner products for tangency.
pub const TANGENCY_TOL: f64 = 1e-10;

/// A d x q matrix whose every column lies on the unit sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct ObliqueMatrix {
    data: DMatrix<f64>,
}

impl ObliqueMatrix {
    /// Wraps a matrix after checking the unit-column invariant.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(ObncError::DimensionMismatch {
                expected: "d >= 1, q >= 1".into(),
                got: format!("{}x{}", data.nrows(), data.ncols()),
            });
        }
        for (j, col) in data.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > MEMBERSHIP_TOL {
                return Err(ObncError::DimensionMismatch {
                    expected: "unit-norm columns".into(),
                    got: format!("column {j} has norm {norm:.17e}"),
                });
            }
        }
        Ok(Self { data })
    }

    /// Normalizes every column of an arbitrary matrix onto the manifold.
    pub fn project(mut data: DMatrix<f64>) -> Result<Self> {
        for j in 0..data.ncols() {
            let norm = data.column(j).norm();
            if norm < 1e-14 {
                return Err(ObncError::DegenerateRetraction { col: j, norm });
            }
            data.column_mut(j).scale_mut(1.0 / norm);
        }
        Self::new(data)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Largest deviation of a column norm from 1.
    pub fn membership_violation(&self) -> f64 {
        self.data
            .column_iter()
            .map(|c| (c.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// A matrix lying in the tangent space at some base point: each column is
/// orthogonal to the matching base column.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentMatrix {
    data: DMatrix<f64>,
}

impl TangentMatrix {
    /// Validates tangency of `data` at `base`.
    pub fn new(base: &ObliqueMatrix, data: DMatrix<f64>) -> Result<Self> {
        check_shape(base, &data)?;
        let violation = tangency_violation(base, &data);
        if violation > TANGENCY_TOL {
            return Err(ObncError::NotTangent { violation });
        }
        Ok(Self { data })
    }

    /// Zero tangent vector at a base of the given shape.
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            data: DMatrix::zeros(nrows, ncols),
        }
    }

    /// Wraps data already known to be tangent (linear combinations of
    /// validated tangent vectors).
    pub(crate) fn from_raw(data: DMatrix<f64>) -> Self {
        Self { data }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }
}

fn check_shape(base: &ObliqueMatrix, z: &DMatrix<f64>) -> Result<()> {
    if z.nrows() != base.nrows() || z.ncols() != base.ncols() {
        return Err(ObncError::DimensionMismatch {
            expected: format!("{}x{}", base.nrows(), base.ncols()),
            got: format!("{}x{}", z.nrows(), z.ncols()),
        });
    }
    Ok(())
}

/// Largest |<x_j, z_j>| over columns.
pub fn tangency_violation(base: &ObliqueMatrix, z: &DMatrix<f64>) -> f64 {
    base.matrix()
        .column_iter()
        .zip(z.column_iter())
        .map(|(x, v)| x.dot(&v).abs())
        .fold(0.0, f64::max)
}

/// A point with columns i.i.d. uniform on the unit sphere. Deterministic for
/// a fixed seed.
pub fn random_oblique(d: usize, q: usize, seed: u64) -> ObliqueMatrix {
    assert!(d >= 1 && q >= 1, "dimensions must be positive");
    let mut rng = SplitMix64::new(seed);
    let mut data = DMatrix::zeros(d, q);
    for j in 0..q {
        loop {
            for i in 0..d {
                data[(i, j)] = rng.next_gaussian();
            }
            let norm = data.column(j).norm();
            if norm > 1e-12 {
                data.column_mut(j).scale_mut(1.0 / norm);
                break;
            }
        }
    }
    ObliqueMatrix { data }
}

/// Projects Z onto the tangent space at X: Z - X ddiag(X^T Z).
pub fn tangent_project(x: &ObliqueMatrix, z: &DMatrix<f64>) -> Result<TangentMatrix> {
    check_shape(x, z)?;
    Ok(TangentMatrix {
        data: tangent_project_raw(x.matrix(), z),
    })
}

pub(crate) fn tangent_project_raw(x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for j in 0..x.ncols() {
        let dot = x.column(j).dot(&z.column(j));
        let xj = x.column(j).clone_owned();
        out.column_mut(j).axpy(-dot, &xj, 1.0);
    }
    out
}

/// Metric-projection retraction: column k maps to
/// (x_k + t v_k) / ||x_k + t v_k||.
pub fn retract(x: &ObliqueMatrix, v: &TangentMatrix, t: f64) -> Result<ObliqueMatrix> {
    check_shape(x, v.matrix())?;
    retract_raw(x.matrix(), v.matrix(), t).map(|data| ObliqueMatrix { data })
}

pub(crate) fn retract_raw(x: &DMatrix<f64>, v: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if t == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x + v * t;
    for j in 0..out.ncols() {
        let norm = out.column(j).norm();
        if norm < 1e-14 {
            return Err(ObncError::DegenerateRetraction { col: j, norm });
        }
        out.column_mut(j).scale_mut(1.0 / norm);
    }
    Ok(out)
}
