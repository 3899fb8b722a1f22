//! Central finite differences and analytic-vs-numeric comparison.

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central-difference gradient of `f` at `p`, one entry at a time.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&DenseMatrix<T>) -> Result<T>,
    p: &DenseMatrix<T>,
    h: T,
) -> Result<DenseMatrix<T>> {
    if !(h > T::zero()) {
        return Err(Error::Contract(format!("step h must be positive, got {h}")));
    }
    let mut out = DenseMatrix::zeros(p.rows(), p.cols());
    let mut probe = p.clone();
    let two = T::lit(2.0);
    for k in 0..p.len() {
        let orig = p.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (two * h);
    }
    Ok(out)
}

/// Worst-entry agreement between an analytic and a numeric gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    /// Largest relative error among entries whose absolute error exceeds the floor.
    pub max_rel: f64,
    pub max_abs: f64,
    pub passed: bool,
}

impl GradComparison {
    pub fn merge(self, other: GradComparison) -> GradComparison {
        GradComparison {
            max_rel: self.max_rel.max(other.max_rel),
            max_abs: self.max_abs.max(other.max_abs),
            passed: self.passed && other.passed,
        }
    }

    pub fn perfect() -> Self {
        GradComparison {
            max_rel: 0.0,
            max_abs: 0.0,
            passed: true,
        }
    }
}

/// An entry passes when `|a-n| <= abs_floor` or `|a-n| / max(|a|,|n|) < rel_tol`.
pub fn compare_grads<T: Scalar>(
    analytic: &DenseMatrix<T>,
    numeric: &DenseMatrix<T>,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradComparison> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape("compare_grads", analytic.shape(), numeric.shape()));
    }
    let mut cmp = GradComparison::perfect();
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let (a, n) = (a.as_f64(), n.as_f64());
        let abs = (a - n).abs();
        cmp.max_abs = cmp.max_abs.max(abs);
        if abs <= abs_floor {
            continue;
        }
        let rel = abs / a.abs().max(n.abs());
        cmp.max_rel = cmp.max_rel.max(rel);
        if !(rel < rel_tol) {
            cmp.passed = false;
        }
    }
    Ok(cmp)
}
