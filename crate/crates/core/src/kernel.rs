//! Squared-exponential kernels over time and condition space, Gram assembly,
//! and jitter-laddered Cholesky factorization.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Unit-variance squared-exponential kernel with per-input-dimension
/// lengthscales. The amplitude is fixed at 1: latent scale is carried by the
/// weights and weight scale by the ARD precisions, so a free variance would be
/// redundant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeKernelParams {
    pub lengthscales: Vec<f64>,
}

impl SeKernelParams {
    pub fn new(lengthscales: Vec<f64>) -> Result<Self> {
        let params = SeKernelParams { lengthscales };
        params.validate()?;
        Ok(params)
    }

    pub fn isotropic(lengthscale: f64) -> Result<Self> {
        Self::new(vec![lengthscale])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one lengthscale"));
        }
        for &l in &self.lengthscales {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::invalid(format!(
                    "lengthscale must be positive and finite, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// k(a, b) = exp(−Σ_k (a_k − b_k)² / 2ℓ_k²) evaluated on two point sets.
/// Rows of `a`/`b` are points; columns are coordinates (must match the number
/// of lengthscales).
pub fn se_gram(a: ArrayView2<f64>, b: ArrayView2<f64>, params: &SeKernelParams) -> Array2<f64> {
    let c = params.lengthscales.len();
    assert_eq!(a.ncols(), c, "point dimension mismatch");
    assert_eq!(b.ncols(), c, "point dimension mismatch");
    let mut out = Array2::<f64>::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let mut q = 0.0;
            for k in 0..c {
                let d = (a[[i, k]] - b[[j, k]]) / params.lengthscales[k];
                q += d * d;
            }
            out[[i, j]] = (-0.5 * q).exp();
        }
    }
    out
}

/// ∂K/∂log ℓ_k for the training Gram K = se_gram(a, a): entry (i,j) is
/// K_ij · (a_ik − a_jk)² / ℓ_k². One matrix per lengthscale.
pub fn se_gram_grad_loglengthscale(
    a: ArrayView2<f64>,
    params: &SeKernelParams,
) -> Vec<Array2<f64>> {
    let gram = se_gram(a, a, params);
    let p = a.nrows();
    params
        .lengthscales
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let mut g = Array2::<f64>::zeros((p, p));
            for i in 0..p {
                for j in 0..p {
                    let d = a[[i, k]] - a[[j, k]];
                    g[[i, j]] = gram[[i, j]] * d * d / (l * l);
                }
            }
            g
        })
        .collect()
}

/// Cholesky-factored Gram matrix. `chol · cholᵀ = k + jitter_used · I`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelGrams {
    /// The symmetric input matrix (without jitter).
    pub k: Array2<f64>,
    /// Lower Cholesky factor of `k + jitter_used·I`.
    pub chol: Array2<f64>,
    pub jitter_used: f64,
    /// log det(k + jitter_used·I).
    pub log_det: f64,
}

impl KernelGrams {
    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    /// `k + jitter_used·I`, the matrix the factor actually represents.
    pub fn jittered(&self) -> Array2<f64> {
        let mut out = self.k.clone();
        for i in 0..out.nrows() {
            out[[i, i]] += self.jitter_used;
        }
        out
    }

    pub fn solve_vec(&self, b: ndarray::ArrayView1<f64>) -> Array1<f64> {
        linalg::chol_solve(&self.chol, b)
    }

    pub fn solve_mat(&self, b: ArrayView2<f64>) -> Array2<f64> {
        linalg::chol_solve_mat(&self.chol, b)
    }

    pub fn inverse(&self) -> Array2<f64> {
        linalg::chol_inverse(&self.chol)
    }
}

/// Factorize `k + jI` with the smallest jitter from the ladder
/// {0, base, 10·base, …, 10⁶·base} that yields a positive-definite matrix.
pub fn factorize(k: Array2<f64>, base_jitter: f64) -> Result<KernelGrams> {
    if k.nrows() != k.ncols() {
        return Err(Error::invalid("Gram matrix must be square"));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("Gram matrix contains non-finite entries"));
    }
    let mut ladder = vec![0.0];
    for e in 0..=6 {
        ladder.push(base_jitter * 10f64.powi(e));
    }
    for &jitter in &ladder {
        if let Some(grams) = factorize_fixed(&k, jitter) {
            return Ok(grams);
        }
    }
    Err(Error::numerical(format!(
        "Cholesky failed at every jitter level up to {:.1e}",
        ladder.last().unwrap()
    )))
}

/// Factorize at one fixed jitter level; `None` if not positive definite.
/// The hyperparameter line search uses this to keep its objective smooth in
/// the lengthscales.
pub fn factorize_fixed(k: &Array2<f64>, jitter: f64) -> Option<KernelGrams> {
    let mut shifted = k.clone();
    for i in 0..shifted.nrows() {
        shifted[[i, i]] += jitter;
    }
    let chol = linalg::cholesky(shifted.view())?;
    let log_det = linalg::chol_log_det(&chol);
    Some(KernelGrams {
        k: k.clone(),
        chol,
        jitter_used: jitter,
        log_det,
    })
}

/// `n` points evenly spaced on [0, 1] (inclusive endpoints), as an n×1 point
/// matrix. Time bins and 1-D condition grids both live on this scale.
pub fn unit_grid(n: usize) -> Array2<f64> {
    let mut pts = Array2::<f64>::zeros((n, 1));
    if n > 1 {
        for i in 0..n {
            pts[[i, 0]] = i as f64 / (n as f64 - 1.0);
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_distance_gives_one() {
        let a = array![[0.0]];
        let params = SeKernelParams::isotropic(0.37).unwrap();
        let g = se_gram(a.view(), a.view(), &params);
        assert_eq!(g[[0, 0]], 1.0);
    }

    #[test]
    fn closed_form_at_sqrt2_lengthscales() {
        // distance ℓ√2 with ℓ=1 ⇒ exp(−1)
        let a = array![[0.0]];
        let b = array![[std::f64::consts::SQRT_2]];
        let params = SeKernelParams::isotropic(1.0).unwrap();
        let g = se_gram(a.view(), b.view(), &params);
        assert!((g[[0, 0]] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((g[[0, 0]] - 0.367_879_441_171_442_3).abs() < 1e-12);
    }

    #[test]
    fn huge_lengthscale_limit_is_constant_one() {
        let a = array![[0.0], [0.3], [0.9]];
        let params = SeKernelParams::isotropic(1e8).unwrap();
        let g = se_gram(a.view(), a.view(), &params);
        for v in g.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_symmetric_psd_unit_diagonal_translation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let p = 8;
            let c = 2;
            let a = Array2::from_shape_fn((p, c), |_| rng.random_range(-2.0..2.0));
            let params = SeKernelParams::new(vec![0.5, 1.3]).unwrap();
            let g = se_gram(a.view(), a.view(), &params);
            for i in 0..p {
                assert_eq!(g[[i, i]], 1.0);
                for j in 0..p {
                    assert_eq!(g[[i, j]], g[[j, i]]);
                }
            }
            assert!(
                crate::linalg::is_psd_within(g.view(), 1e-10),
                "trial {trial}: gram not PSD within 1e-10"
            );
            // simultaneous translation of all points leaves the Gram unchanged
            let shifted = &a + 3.7;
            let g2 = se_gram(shifted.view(), shifted.view(), &params);
            for (x, y) in g.iter().zip(g2.iter()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn factorize_identity_needs_no_jitter() {
        let g = factorize(Array2::eye(4), 1e-8).unwrap();
        assert_eq!(g.jitter_used, 0.0);
        for i in 0..4 {
            assert!((g.chol[[i, i]] - 1.0).abs() < 1e-15);
        }
        assert!(g.log_det.abs() < 1e-14);
    }

    #[test]
    fn factorize_rank_deficient_escalates_jitter() {
        let ones = Array2::from_elem((3, 3), 1.0);
        let g = factorize(ones.clone(), 1e-8).unwrap();
        assert!(g.jitter_used > 0.0);
        let rec = g.chol.dot(&g.chol.t());
        let target = g.jittered();
        let num = (&rec - &target).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-10, "relative Frobenius error {}", num / den);
    }

    #[test]
    fn factorize_rejects_nan() {
        let mut k = Array2::eye(3);
        k[[0, 1]] = f64::NAN;
        assert!(factorize(k, 1e-8).is_err());
    }

    #[test]
    fn gradient_single_point_is_zero() {
        let a = array![[0.4]];
        let params = SeKernelParams::isotropic(0.7).unwrap();
        let g = se_gram_grad_loglengthscale(a.view(), &params);
        assert_eq!(gewrap(&g), 0.0);
        fn gewrap(g: &[Array2<f64>]) -> f64 {
            g.iter().flat_map(|m| m.iter()).map(|v| v.abs()).sum()
        }
    }

    #[test]
    fn gradient_two_points_hand_value() {
        // distance exactly ℓ: off-diagonal K = e^{-1/2}, gradient K·d²/ℓ² = e^{-1/2}
        let l = 0.8;
        let a = array![[0.0], [l]];
        let params = SeKernelParams::isotropic(l).unwrap();
        let g = se_gram_grad_loglengthscale(a.view(), &params);
        let want = (-0.5f64).exp();
        assert!((g[0][[0, 1]] - want).abs() < 1e-12);
        assert!((g[0][[0, 1]] - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let ls = vec![0.6, 1.1];
        let params = SeKernelParams::new(ls.clone()).unwrap();
        let grads = se_gram_grad_loglengthscale(a.view(), &params);
        let h = 1e-6f64;
        for k in 0..2 {
            let mut up = ls.clone();
            let mut dn = ls.clone();
            up[k] *= h.exp();
            dn[k] *= (-h).exp();
            let gp = se_gram(a.view(), a.view(), &SeKernelParams::new(up).unwrap());
            let gm = se_gram(a.view(), a.view(), &SeKernelParams::new(dn).unwrap());
            let fd = (&gp - &gm) / (2.0 * h);
            for (x, y) in grads[k].iter().zip(fd.iter()) {
                let denom = y.abs().max(1e-8);
                assert!(
                    ((x - y) / denom).abs() < 1e-6,
                    "k={k}: analytic {x} vs fd {y}"
                );
            }
        }
    }

    #[test]
    fn unit_grid_endpoints() {
        let g = unit_grid(5);
        assert_eq!(g[[0, 0]], 0.0);
        assert_eq!(g[[4, 0]], 1.0);
        assert_eq!(unit_grid(1)[[0, 0]], 0.0);
    }
}
