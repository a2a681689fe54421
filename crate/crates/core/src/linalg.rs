//! Small dense linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{RdError, Result};

/// Condition-number ceiling for sandwich inversions.
pub const COND_LIMIT: f64 = 1e12;

/// Inverse of a square matrix, refusing ill-conditioned input.
pub fn inverse_guarded(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smin > 0.0) || !smax.is_finite() {
        return Err(RdError::SingularS(f64::INFINITY));
    }
    let cond = smax / smin;
    if cond > COND_LIMIT {
        return Err(RdError::SingularS(cond));
    }
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut sinv_ut = u.transpose();
    for (i, mut row) in sinv_ut.row_iter_mut().enumerate() {
        row /= s[i];
    }
    Ok(vt.transpose() * sinv_ut)
}

/// Solves `a x = b` for a small square system; `None` when singular.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Weighted least squares of `y` on the columns of `x`.
pub fn weighted_least_squares(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Option<DVector<f64>> {
    let p = x.ncols();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for i in 0..x.nrows() {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            xty[a] += xa * y[i];
            for b in a..p {
                xtx[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    xtx.cholesky().map(|c| c.solve(&xty))
}

/// Rank of a matrix using a relative singular-value threshold.
pub fn rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let s = m.clone().singular_values();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * smax).count()
}
