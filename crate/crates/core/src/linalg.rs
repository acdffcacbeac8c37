//! Small dense linear-algebra helpers shared by the solver and the analysis lab.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for pseudo-inverses and rank decisions.
pub const SVD_CUTOFF: f64 = 1e-12;

pub fn singular_values(a: &DMatrix<f64>) -> DVector<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(0);
    }
    a.clone().svd(false, false).singular_values
}

/// Induced 2-norm.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    singular_values(a).iter().cloned().fold(0.0, f64::max)
}

/// Smallest of the min(rows, cols) singular values.
pub fn sigma_min(a: &DMatrix<f64>) -> f64 {
    singular_values(a)
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Moore–Penrose pseudo-inverse with singular values below `SVD_CUTOFF * sigma_max` dropped.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = a.shape();
    if r == 0 || c == 0 {
        return DMatrix::zeros(c, r);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let cutoff = SVD_CUTOFF * smax;
    let mut out = DMatrix::zeros(c, r);
    for (k, &sk) in s.iter().enumerate() {
        if sk > cutoff && sk > 0.0 {
            out += (v_t.row(k).transpose() / sk) * u.column(k).transpose();
        }
    }
    out
}

/// Orthonormal basis of ker(M) for a full-row-rank `M` (n × q, n ≤ q).
///
/// Built from a full Householder QR of Mᵀ: the trailing q − n columns of the
/// complete orthogonal factor span the orthogonal complement of range(Mᵀ).
pub fn nullspace_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q) = m.shape();
    assert!(n <= q, "nullspace_basis expects a wide matrix");
    if q == n {
        return DMatrix::zeros(q, 0);
    }
    let qr = m.transpose().qr();
    let mut q_t = DMatrix::<f64>::identity(q, q);
    qr.q_tr_mul(&mut q_t);
    // rows of Qᵀ are columns of Q
    q_t.rows(n, q - n).transpose()
}

/// (min, max) eigenvalue of a symmetric matrix.
pub fn sym_eig_range(a: &DMatrix<f64>) -> (f64, f64) {
    if a.nrows() == 0 {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let sym = (a + a.transpose()) * 0.5;
    let ev = sym.symmetric_eigenvalues();
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Solves `h x = rhs` for symmetric positive definite `h`, falling back to LU.
pub fn spd_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Some(ch.solve(rhs));
    }
    h.clone().lu().solve(rhs)
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Stacks equally sized vectors into one long column.
pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

/// Splits a stacked column into `count` blocks of length `size`.
pub fn unstack(v: &DVector<f64>, size: usize, count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .map(|i| v.rows(i * size, size).into_owned())
        .collect()
}
