//! Small dense linear-algebra helpers shared by the estimation modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for numerical rank decisions.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Relative tolerance used when pruning dependent restriction rows.
pub const ROW_REDUCE_TOLERANCE: f64 = 1e-10;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Rank with singular values below `1e-8 · σ_max · max(rows, cols)` treated as zero.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let cutoff = RANK_TOLERANCE * smax * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Ratio of extreme singular values; infinite when singular.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Keeps a maximal linearly independent subset of the rows of `c`, scanning
/// in order. A row is dropped when its component orthogonal to the rows kept
/// so far is below `1e-10 · max|c|` in norm. Kept rows are returned unchanged,
/// so integer contrasts stay integer.
pub fn row_reduce(c: &DMatrix<f64>) -> DMatrix<f64> {
    let ncols = c.ncols();
    let scale = max_abs(c);
    if c.nrows() == 0 || scale == 0.0 {
        return DMatrix::zeros(0, ncols);
    }
    let tol = ROW_REDUCE_TOLERANCE * scale;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    for i in 0..c.nrows() {
        let row = c.row(i).transpose();
        let mut resid = row.clone();
        // Two passes of classical Gram-Schmidt keep the residual accurate.
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&resid);
                resid.axpy(-proj, q, 1.0);
            }
        }
        let norm = resid.norm();
        if norm > tol {
            basis.push(resid / norm);
            kept.push(i);
        }
    }
    c.select_rows(kept.iter())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("matrix is not positive definite".into()))?;
    Ok(chol.inverse())
}

/// Orthonormal basis of the null space of `a` (columns), via SVD.
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to a square matrix so the SVD returns a full V.
    let mut padded = DMatrix::zeros(a.nrows().max(n), n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = RANK_TOLERANCE * smax.max(1e-300) * a.nrows().max(n) as f64;
    let null_rows: Vec<usize> = (0..v_t.nrows())
        .filter(|&i| svd.singular_values[i] <= cutoff)
        .collect();
    v_t.select_rows(null_rows.iter()).transpose()
}

/// Minimizes `½ xᵀHx − gᵀx` subject to `Ax = b` by solving the KKT system.
pub fn solve_equality_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = h.nrows();
    let m = a.nrows();
    if h.ncols() != n || g.len() != n || a.ncols() != n || b.len() != m {
        return Err(Error::Shape("inconsistent quadratic program dimensions".into()));
    }
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(g);
    rhs.rows_mut(n, m).copy_from(b);
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::IllConditioned("singular KKT system".into()))?;
    Ok(sol.rows(0, n).into_owned())
}
