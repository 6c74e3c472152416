//! GP-conditional prediction of loading weights and firing rates at
//! experimental conditions that were never observed.
//!
//! The fitted model's effective weight prior over the training conditions is
//! K_W + jI (the jitter used during inference). Prediction treats that jitter
//! as independent per-point noise, so the cross covariance between a new
//! point and a training point gains +j exactly when their coordinates
//! coincide. Predicting at a training condition then returns that
//! condition's posterior slice identically.

use ndarray::{Array1, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Likelihood;
use crate::error::{Error, Result};
use crate::kernel::{se_gram, KernelGrams, SeKernelParams};
use crate::linalg;
use crate::special::sigmoid;
use crate::state::{GaussianVec, VariationalState};

/// Conditions to predict at; the time axis reuses the training grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRequest {
    /// M*×C coordinates.
    pub new_condition_coords: Array2<f64>,
}

impl PredictionRequest {
    pub fn validate(&self, state: &VariationalState) -> Result<()> {
        if self.new_condition_coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prediction coordinates must be finite"));
        }
        if self.new_condition_coords.ncols() != state.condition_lengthscales.len() {
            return Err(Error::invalid(format!(
                "prediction coordinates have {} axes but the model was fit with {}",
                self.new_condition_coords.ncols(),
                state.condition_lengthscales.len()
            )));
        }
        if self.new_condition_coords.nrows() == 0 {
            return Err(Error::invalid("no conditions to predict"));
        }
        Ok(())
    }
}

/// Per-neuron Gaussian over vec(W*_{:,n,:}) (d-major, M* conditions per
/// block).
#[derive(Debug, Clone)]
pub struct WeightPrediction {
    pub per_neuron: Vec<GaussianVec>,
    pub n_new: usize,
}

/// Cross-covariance between new and training conditions under the jittered
/// kernel: SE Gram plus j on exactly-coincident coordinate pairs.
fn cross_gram(
    new_pts: ArrayView2<f64>,
    train_pts: ArrayView2<f64>,
    params: &SeKernelParams,
    jitter: f64,
) -> Array2<f64> {
    let mut k = se_gram(new_pts, train_pts, params);
    for i in 0..new_pts.nrows() {
        for j in 0..train_pts.nrows() {
            if new_pts.row(i) == train_pts.row(j) {
                k[[i, j]] += jitter;
            }
        }
    }
    k
}

/// GP conditional for the weights at new conditions:
/// mean*  = (I_D ⊗ K_*f K_ff⁻¹) m_n,
/// cov*   = diag(E[τ])⁻¹ ⊗ (K_** − K_*f K_ff⁻¹ K_f*) + (I⊗C) V_n (I⊗C)ᵀ,
/// conditional prior uncertainty plus propagated posterior uncertainty.
pub fn predict_weights(
    state: &VariationalState,
    cond_grams: &KernelGrams,
    train_coords: &Array2<f64>,
    request: &PredictionRequest,
) -> Result<WeightPrediction> {
    request.validate(state)?;
    let params = SeKernelParams::new(state.condition_lengthscales.clone())?;
    let new_pts = &request.new_condition_coords;
    let jitter = cond_grams.jitter_used;
    let k_star_f = cross_gram(new_pts.view(), train_coords.view(), &params, jitter);
    let mut k_star_star = se_gram(new_pts.view(), new_pts.view(), &params);
    for i in 0..new_pts.nrows() {
        k_star_star[[i, i]] += jitter;
    }
    predict_weights_with(state, cond_grams, &k_star_f, &k_star_star)
}

/// Core conditional with explicit cross and new-point Grams (exposed so the
/// identity/delta-kernel ablation can be exercised directly).
pub fn predict_weights_with(
    state: &VariationalState,
    cond_grams: &KernelGrams,
    k_star_f: &Array2<f64>,
    k_star_star: &Array2<f64>,
) -> Result<WeightPrediction> {
    let (m_count, d_count) = (state.n_conditions(), state.n_latents());
    let n_new = k_star_f.nrows();
    if k_star_f.ncols() != m_count || k_star_star.nrows() != n_new {
        return Err(Error::invalid("prediction Gram shape mismatch"));
    }
    // C = K_*f K_ff⁻¹ via K_ff Cᵀ = K_f*
    let c_op_t = cond_grams.solve_mat(k_star_f.t());
    let c_op = c_op_t.t().to_owned();
    // conditional prior block K_** − K_*f K_ff⁻¹ K_f*
    let mut k_cond = k_star_star - &k_star_f.dot(&c_op_t);
    // symmetrize round-off
    for i in 0..n_new {
        for j in 0..i {
            let v = 0.5 * (k_cond[[i, j]] + k_cond[[j, i]]);
            k_cond[[i, j]] = v;
            k_cond[[j, i]] = v;
        }
    }

    let per_neuron = state
        .weights
        .iter()
        .map(|w| {
            let mut mean = Array1::<f64>::zeros(n_new * d_count);
            for d in 0..d_count {
                let slice = w.mean.slice(ndarray::s![d * m_count..(d + 1) * m_count]);
                let projected = c_op.dot(&slice);
                mean.slice_mut(ndarray::s![d * n_new..(d + 1) * n_new])
                    .assign(&projected);
            }
            let mut cov = Array2::<f64>::zeros((n_new * d_count, n_new * d_count));
            for d in 0..d_count {
                let tau = state.ard_mean(d);
                for d2 in 0..d_count {
                    // V_n block (d, d2) propagated through C on both sides
                    let block = w.cov.slice(ndarray::s![
                        d * m_count..(d + 1) * m_count,
                        d2 * m_count..(d2 + 1) * m_count
                    ]);
                    let propagated = c_op.dot(&block).dot(&c_op.t());
                    for i in 0..n_new {
                        for j in 0..n_new {
                            let mut v = propagated[[i, j]];
                            if d == d2 {
                                v += k_cond[[i, j]] / tau;
                            }
                            cov[[d * n_new + i, d2 * n_new + j]] = v;
                        }
                    }
                }
            }
            GaussianVec { mean, cov }
        })
        .collect();

    Ok(WeightPrediction { per_neuron, n_new })
}

/// Predicted firing rates at new conditions with a per-entry variance proxy.
#[derive(Debug, Clone)]
pub struct RatePrediction {
    /// (M*, N, T) plug-in rates.
    pub rates: Array3<f64>,
    /// (M*, N, T) linear-predictor means.
    pub linear_predictor: Array3<f64>,
    /// (M*, N, T) variance of F̂ from the predicted weight covariance.
    pub rate_var_proxy: Array3<f64>,
}

/// Plug-in rates r̂ = E[r_n]·exp(F̂) (or k_n·σ(F̂) for the binomial model)
/// with F̂ = E[β_n] + Σ_d mean*_{m,n,d}·E[X_{d,t}]. The variance proxy is the
/// variance of F̂ under the predicted weight covariance at fixed latent
/// means.
pub fn predict_rates(state: &VariationalState, weights: &WeightPrediction) -> RatePrediction {
    let (n_count, t_count, d_count) = (state.n_neurons(), state.n_bins(), state.n_latents());
    let n_new = weights.n_new;
    let mut rates = Array3::zeros((n_new, n_count, t_count));
    let mut f_hat = Array3::zeros((n_new, n_count, t_count));
    let mut var_proxy = Array3::zeros((n_new, n_count, t_count));
    for n in 0..n_count {
        let w = &weights.per_neuron[n];
        for m in 0..n_new {
            for t in 0..t_count {
                let mut f = state.bias_mean[n];
                let mut var = 0.0;
                for d in 0..d_count {
                    let mu = state.latents[d].mean[t];
                    f += w.mean[d * n_new + m] * mu;
                    for d2 in 0..d_count {
                        var += w.cov[[d * n_new + m, d2 * n_new + m]]
                            * mu
                            * state.latents[d2].mean[t];
                    }
                }
                f_hat[[m, n, t]] = f;
                var_proxy[[m, n, t]] = var;
                rates[[m, n, t]] = match state.likelihood {
                    Likelihood::NegBinomial => state.disp_mean[n] * f.exp(),
                    Likelihood::Binomial => {
                        let k = state.binomial_k.as_ref().expect("binomial trial counts")[n];
                        k * sigmoid(f)
                    }
                };
            }
        }
    }
    RatePrediction {
        rates,
        linear_predictor: f_hat,
        rate_var_proxy: var_proxy,
    }
}

/// Plug-in rates of the fitted model at its own training conditions.
pub fn fitted_rates(state: &VariationalState) -> Array3<f64> {
    let fm = state.f_moments();
    let (m_count, n_count, t_count) = fm.mean.dim();
    Array3::from_shape_fn((m_count, n_count, t_count), |(m, n, t)| {
        match state.likelihood {
            Likelihood::NegBinomial => state.disp_mean[n] * fm.mean[[m, n, t]].exp(),
            Likelihood::Binomial => {
                let k = state.binomial_k.as_ref().expect("binomial trial counts")[n];
                k * sigmoid(fm.mean[[m, n, t]])
            }
        }
    })
}

/// Smallest shift from `shifts` under which every predicted covariance block
/// admits a Cholesky factorization (tests use this as a PSD probe).
pub fn covariance_psd_shift(weights: &WeightPrediction, shifts: &[f64]) -> Option<f64> {
    'shift: for &s in shifts {
        for w in &weights.per_neuron {
            if !linalg::is_psd_within(w.cov.view(), s) {
                continue 'shift;
            }
        }
        return Some(s);
    }
    None
}
