//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Result, UfmError};

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
/// Ties are broken by original index so the ordering is deterministic.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if m.nrows() != m.ncols() {
        return Err(UfmError::EigenFailure("matrix is not square".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(UfmError::EigenFailure("matrix has non-finite entries".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| UfmError::EigenFailure("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| eig.eigenvectors[(i, order[k])]);
    Ok((values, vectors))
}

/// Smallest gap between consecutive values among the first `k + 1` (or fewer).
pub fn min_leading_gap(values: &[f64], k: usize) -> f64 {
    let upto = (k + 1).min(values.len());
    values[..upto]
        .windows(2)
        .map(|w| (w[0] - w[1]).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Flips columns of `f` so that each has a nonnegative sum; returns the signs.
pub fn fix_column_signs(f: &mut DMatrix<f64>) -> Vec<f64> {
    (0..f.ncols())
        .map(|j| {
            let s = f.column(j).sum();
            if s < 0.0 {
                f.column_mut(j).neg_mut();
                -1.0
            } else {
                1.0
            }
        })
        .collect()
}

/// In-place Cholesky of a row-major `r x r` matrix; `false` when not positive definite.
pub fn cholesky_in_place(a: &mut [f64], r: usize) -> bool {
    for j in 0..r {
        let mut d = a[j * r + j];
        for k in 0..j {
            d -= a[j * r + k] * a[j * r + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * r + j] = d;
        for i in (j + 1)..r {
            let mut s = a[i * r + j];
            for k in 0..j {
                s -= a[i * r + k] * a[j * r + k];
            }
            a[i * r + j] = s / d;
        }
    }
    true
}

/// Solves `L L' x = b` given the factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], r: usize, b: &mut [f64]) {
    for i in 0..r {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * r + k] * b[k];
        }
        b[i] = s / l[i * r + i];
    }
    for i in (0..r).rev() {
        let mut s = b[i];
        for k in (i + 1)..r {
            s -= l[k * r + i] * b[k];
        }
        b[i] = s / l[i * r + i];
    }
}

/// Inverse of a symmetric matrix through its eigendecomposition, with
/// eigenvalues floored at `floor_rel * trace`. Also returns the condition number
/// of the unfloored matrix.
pub fn sym_inverse_floored(m: &DMatrix<f64>, floor_rel: f64) -> Result<(DMatrix<f64>, f64)> {
    let (vals, vecs) = sym_eigen_desc(m)?;
    let trace: f64 = vals.iter().sum();
    let floor = floor_rel * trace.abs().max(f64::MIN_POSITIVE);
    let max = vals.first().copied().unwrap_or(0.0);
    let min = vals.last().copied().unwrap_or(0.0);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    let inv_vals = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        vals.len(),
        vals.iter().map(|&v| 1.0 / v.max(floor)),
    ));
    Ok((&vecs * inv_vals * vecs.transpose(), cond))
}

/// Row-major copy of a matrix.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Singular values of `m`, descending.
pub fn singular_values_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let (v, vecs) = sym_eigen_desc(&m).unwrap();
        assert_eq!(v, vec![5.0, 2.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_roundtrip() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let mut l = a;
        assert!(cholesky_in_place(&mut l, 2));
        let mut b = [2.0, 1.0];
        cholesky_solve(&l, 2, &mut b);
        assert!((4.0 * b[0] + 2.0 * b[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * b[0] + 3.0 * b[1] - 1.0).abs() < 1e-12);
        let mut indef = [1.0, 2.0, 2.0, 1.0];
        assert!(!cholesky_in_place(&mut indef, 2));
    }

    #[test]
    fn signs_fixed() {
        let mut f = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, -2.0, 1.0]);
        let s = fix_column_signs(&mut f);
        assert_eq!(s, vec![-1.0, 1.0]);
        assert_eq!(f[(0, 0)], 1.0);
    }
}
