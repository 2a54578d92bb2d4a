//! Small dense factorizations used by the tensor-train code, with the sign and
//! ordering conventions the rest of the crate relies on.

use nalgebra::{DMatrix, DVector};

/// Thin QR of an `m x n` matrix with `m >= n`: `Q` is `m x n` with orthonormal
/// columns and `R` is `n x n` upper triangular with a non-negative diagonal.
pub fn thin_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = a.shape();
    assert!(m >= n, "thin QR needs a tall matrix, got {m}x{n}");
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            r.row_mut(j).neg_mut();
            q.column_mut(j).neg_mut();
        }
    }
    (q, r)
}

/// Thin SVD with singular values sorted in non-increasing order.
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd_sorted(a: &DMatrix<f64>) -> SortedSvd {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_t = DMatrix::from_fn(order.len(), v_t.ncols(), |r, c| v_t[(order[r], c)]);
    let s = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    SortedSvd { u, s, v_t }
}

/// Largest absolute entry of `A^T A - I`.
pub fn column_orthonormality_residual(a: &DMatrix<f64>) -> f64 {
    let g = a.transpose() * a;
    max_abs_minus_identity(&g)
}

/// Largest absolute entry of `A A^T - I`.
pub fn row_orthonormality_residual(a: &DMatrix<f64>) -> f64 {
    let g = a * a.transpose();
    max_abs_minus_identity(&g)
}

fn max_abs_minus_identity(g: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..g.ncols() {
        for i in 0..g.nrows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}
