//! Small dense linear-algebra helpers shared by the fitting routines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for declaring a column linearly dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Indices of a maximal set of linearly independent columns, scanning left to
/// right (modified Gram-Schmidt). Earlier columns always win, so an intercept
/// placed first is never dropped in favour of a later column.
pub fn independent_columns(x: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        // second pass for numerical orthogonality
        for q in &basis {
            let proj = q.dot(&v);
            v -= q * proj;
        }
        let resid = v.norm();
        if resid > tol * norm {
            basis.push(v / resid);
            keep.push(j);
        }
    }
    keep
}

/// Solves `min_b sum_i w_i (y_i - x_i' b)^2` by Householder QR on the
/// row-scaled system. Requires full column rank.
pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let (n, k) = x.shape();
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    if n < k {
        return Err(Error::SingularNormalEquations);
    }
    let mut xs = x.clone();
    let mut ys = y.clone();
    if let Some(w) = w {
        for i in 0..n {
            let s = w[i].sqrt();
            xs.row_mut(i).scale_mut(s);
            ys[i] *= s;
        }
    }
    let qr = xs.qr();
    let r = qr.r();
    let max_diag = (0..k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..k).any(|j| r[(j, j)].abs() <= RANK_TOL * max_diag) {
        return Err(Error::SingularNormalEquations);
    }
    let qty = qr.q().transpose() * ys;
    r.solve_upper_triangular(&qty)
        .ok_or(Error::SingularNormalEquations)
}

/// 2-norm condition number via singular values.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves a square system with partial-pivot LU, refusing near-singular input.
pub fn solve_square(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let cond = condition_number(a);
    if !cond.is_finite() || cond > 1e14 {
        return None;
    }
    a.clone().lu().solve(b)
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
