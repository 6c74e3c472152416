//! Small dense linear algebra: Cholesky factorization and triangular solves.
//!
//! Every matrix in the model is modest (at most a few hundred rows), so a
//! plain O(n³) factorization is more than fast enough and keeps results
//! bit-reproducible regardless of thread count. Inner loops run on
//! contiguous row slices; matrices are row-major.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

/// Lower Cholesky factor of a symmetric matrix, or `None` if the matrix is
/// not (numerically) positive definite or contains non-finite entries.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let (head, tail) = l.split_at_mut(j * n + n);
        let row_j = &head[j * n..j * n + j];
        let mut d = a[[j, j]] - dot(row_j, row_j);
        if !(d.is_finite() && d > 0.0) {
            return None;
        }
        d = d.sqrt();
        head[j * n + j] = d;
        let row_j = &head[j * n..j * n + j];
        for i in (j + 1)..n {
            let row_i = &tail[(i - j - 1) * n..(i - j - 1) * n + j];
            let s = a[[i, j]] - dot(row_i, row_j);
            if !s.is_finite() {
                return None;
            }
            tail[(i - j - 1) * n + j] = s / d;
        }
    }
    Array2::from_shape_vec((n, n), l).ok()
}

/// Solve L x = b with L lower triangular (forward substitution on rows).
pub fn solve_lower(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let ls = l.as_slice().expect("row-major factor");
    let mut x: Vec<f64> = b.to_vec();
    for i in 0..n {
        let row = &ls[i * n..i * n + i];
        let s = x[i] - dot(row, &x[..i]);
        x[i] = s / ls[i * n + i];
    }
    Array1::from_vec(x)
}

/// Solve Lᵀ x = b with L lower triangular (backward substitution).
pub fn solve_lower_t(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let ls = l.as_slice().expect("row-major factor");
    let mut x: Vec<f64> = b.to_vec();
    for i in (0..n).rev() {
        // subtract the already-solved tail: column i of L below the diagonal
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= ls[k * n + i] * x[k];
        }
        x[i] = s / ls[i * n + i];
    }
    Array1::from_vec(x)
}

/// Solve (L Lᵀ) x = b.
pub fn chol_solve(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_lower_t(l, y.view())
}

/// Solve (L Lᵀ) X = B for all columns of B at once. Works on the transposed
/// right-hand side so every inner loop touches contiguous memory.
pub fn chol_solve_mat(l: &Array2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let cols = b.ncols();
    let ls = l.as_slice().expect("row-major factor");
    // xt[c * n + i] holds column c of the solution
    let mut xt = vec![0.0f64; cols * n];
    for c in 0..cols {
        for i in 0..n {
            xt[c * n + i] = b[[i, c]];
        }
    }
    for x in xt.chunks_exact_mut(n) {
        for i in 0..n {
            let row = &ls[i * n..i * n + i];
            let s = x[i] - dot(row, &x[..i]);
            x[i] = s / ls[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= ls[k * n + i] * x[k];
            }
            x[i] = s / ls[i * n + i];
        }
    }
    let mut out = Array2::<f64>::zeros((n, cols));
    for c in 0..cols {
        for i in 0..n {
            out[[i, c]] = xt[c * n + i];
        }
    }
    out
}

/// Inverse of A = L Lᵀ via L⁻¹ followed by the symmetric product L⁻ᵀ L⁻¹.
pub fn chol_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let ls = l.as_slice().expect("row-major factor");
    // columns of L⁻¹, stored transposed so each lives contiguously:
    // li_t[j*n + i] = (L⁻¹)[i, j], nonzero for i ≥ j
    let mut li_t = vec![0.0f64; n * n];
    for j in 0..n {
        let x = &mut li_t[j * n..(j + 1) * n];
        x[j] = 1.0 / ls[j * n + j];
        for i in (j + 1)..n {
            let s = dot(&ls[i * n + j..i * n + i], &x[j..i]);
            x[i] = -s / ls[i * n + i];
        }
    }
    // inv[i,j] = Σ_k (L⁻¹)[k,i]·(L⁻¹)[k,j], contiguous in k for both rows
    let mut inv = vec![0.0f64; n * n];
    for i in 0..n {
        let row_i = &li_t[i * n..(i + 1) * n];
        for j in 0..=i {
            let row_j = &li_t[j * n..(j + 1) * n];
            let v = dot(&row_i[i..], &row_j[i..]);
            inv[i * n + j] = v;
            inv[j * n + i] = v;
        }
    }
    Array2::from_shape_vec((n, n), inv).expect("shape")
}

/// log det(L Lᵀ) = 2 Σ log L_ii.
pub fn chol_log_det(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// vᵀ (L Lᵀ)^{-1} v.
pub fn quad_form_inv(l: &Array2<f64>, v: ArrayView1<f64>) -> f64 {
    let y = solve_lower(l, v);
    y.iter().map(|x| x * x).sum()
}

/// Whether `a + shift·I` admits a Cholesky factorization. Used by tests as a
/// proxy for "minimum eigenvalue ≥ −shift".
pub fn is_psd_within(a: ArrayView2<f64>, shift: f64) -> bool {
    let n = a.nrows();
    let mut b = a.to_owned();
    for i in 0..n {
        b[[i, i]] += shift;
    }
    cholesky(b.view()).is_some()
}
