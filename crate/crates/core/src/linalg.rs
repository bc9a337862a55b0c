//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Inverse of a symmetric positive-definite matrix, `None` if Cholesky fails.
pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().cholesky().map(|c| c.inverse())
}

/// Moore–Penrose pseudo-inverse with relative singular-value cutoff.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = max_sv * 1e-12 * a.nrows().max(a.ncols()) as f64;
    svd.pseudo_inverse(cutoff).expect("svd computed with both factors")
}

/// Indices of columns that are (numerically) linear combinations of the
/// columns before them, judged from the cross-product matrix `xtx`.
pub fn collinear_columns(xtx: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let k = xtx.nrows();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..k {
        let diag = xtx[(j, j)];
        if !(diag > 0.0) {
            dropped.push(j);
            continue;
        }
        let resid = if kept.is_empty() {
            diag
        } else {
            let sub = DMatrix::from_fn(kept.len(), kept.len(), |a, b| xtx[(kept[a], kept[b])]);
            let cross = DVector::from_fn(kept.len(), |a, _| xtx[(kept[a], j)]);
            match sub.cholesky() {
                Some(ch) => diag - cross.dot(&ch.solve(&cross)),
                None => 0.0,
            }
        };
        if resid <= rel_tol * diag {
            dropped.push(j);
        } else {
            kept.push(j);
        }
    }
    dropped
}

/// `(A + A') / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}
