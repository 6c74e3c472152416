//! Model configuration, priors, and the full variational state, together
//! with the moments of the linear predictor F that every update consumes.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::GammaParams;
use crate::data::{Likelihood, SpikeTensor};
use crate::error::{Error, Result};
use crate::infer;
use crate::kernel::{factorize, se_gram, unit_grid, KernelGrams, SeKernelParams};

/// Fit configuration: likelihood choice, latent pool size, prior constants,
/// kernel initializations, and the EM schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent pool size D (relevance determination prunes unused ones).
    #[serde(default = "default_latents")]
    pub latents: usize,
    #[serde(default)]
    pub likelihood: Likelihood,
    /// ARD Gamma prior shape/rate per latent dimension.
    #[serde(default = "default_prior_const")]
    pub ard_shape: f64,
    #[serde(default = "default_prior_const")]
    pub ard_rate: f64,
    /// Gamma prior on the shared bias precision.
    #[serde(default = "default_prior_const")]
    pub bias_prec_shape: f64,
    #[serde(default = "default_prior_const")]
    pub bias_prec_rate: f64,
    /// Initial time-kernel lengthscales: one entry broadcasts over all D.
    #[serde(default = "default_time_lengthscales")]
    pub time_lengthscales: Vec<f64>,
    /// Initial condition-kernel lengthscales, one per condition axis.
    #[serde(default = "default_condition_lengthscales")]
    pub condition_lengthscales: Vec<f64>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Convergence tolerance on the per-bin log-likelihood monitor.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Gradient-ascent steps on the kernel lengthscales per outer iteration.
    #[serde(default = "default_mstep_steps")]
    pub mstep_steps: usize,
    #[serde(default = "default_mstep_step_size")]
    pub mstep_step_size: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_latents() -> usize {
    10
}
fn default_prior_const() -> f64 {
    1e-5
}
fn default_time_lengthscales() -> Vec<f64> {
    vec![0.2]
}
fn default_condition_lengthscales() -> Vec<f64> {
    vec![0.3]
}
fn default_jitter() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    1000
}
fn default_tol() -> f64 {
    1e-6
}
fn default_mstep_steps() -> usize {
    10
}
fn default_mstep_step_size() -> f64 {
    0.01
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latents < 1 {
            return Err(Error::invalid("latent pool size must be at least 1"));
        }
        for &v in &[
            self.ard_shape,
            self.ard_rate,
            self.bias_prec_shape,
            self.bias_prec_rate,
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid("prior constants must be positive"));
            }
        }
        if !(self.jitter.is_finite() && self.jitter > 0.0) {
            return Err(Error::invalid("jitter must be positive"));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::invalid("tolerance must be non-negative"));
        }
        if self.time_lengthscales.is_empty()
            || !(self.time_lengthscales.len() == 1 || self.time_lengthscales.len() == self.latents)
        {
            return Err(Error::invalid(format!(
                "time_lengthscales must have 1 or {} entries",
                self.latents
            )));
        }
        for &l in self
            .time_lengthscales
            .iter()
            .chain(self.condition_lengthscales.iter())
        {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::invalid("lengthscales must be positive"));
            }
        }
        if self.mstep_step_size <= 0.0 {
            return Err(Error::invalid("m-step step size must be positive"));
        }
        Ok(())
    }

    /// Per-latent time lengthscales after broadcasting a single entry.
    pub fn initial_time_lengthscales(&self) -> Vec<f64> {
        if self.time_lengthscales.len() == 1 {
            vec![self.time_lengthscales[0]; self.latents]
        } else {
            self.time_lengthscales.clone()
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let cfg: ModelConfig = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean and covariance of one Gaussian variational factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVec {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// Moments of the per-observation augmentation factors, reduced over trials.
///
/// The PG mean is linear in its shape, so per-(condition, neuron, bin) sums
/// over trials are exact with only the shape-free factor stored:
/// E[ω_{m,trial,n,t}] = (y + E[r_n]) · omega_scale[m,n,t].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugMoments {
    /// tanh(c/2)/(2c) at the current tilt c = √E[F²], per (m, n, t).
    pub omega_scale: Array3<f64>,
    /// A[m,n,t] = Σ_trials E[ω].
    pub omega_sum: Array3<f64>,
    /// B[m,n,t] = Σ_trials E[ω]·Ŷ with pseudo-observation Ŷ; equals
    /// (Σ_trials y − R·E[r_n])/2 for the negative binomial and
    /// Σ_trials y − R·k_n/2 for the binomial likelihood.
    pub pseudo_sum: Array3<f64>,
    /// Σ_trials ψ(y + E[r_n]) per (m, n, t); augmented-Gamma log moment
    /// E[log τ̂] = ψ(y + E[r_n]) − log 1 summed over trials.
    pub log_tau_sum: Array3<f64>,
    /// P-IG mean E[ξ_n] at tilt √E[r_n²], per neuron.
    pub xi_mean: Array1<f64>,
}

impl AugMoments {
    pub fn zeros(m: usize, n: usize, t: usize) -> Self {
        AugMoments {
            omega_scale: Array3::zeros((m, n, t)),
            omega_sum: Array3::zeros((m, n, t)),
            pseudo_sum: Array3::zeros((m, n, t)),
            log_tau_sum: Array3::zeros((m, n, t)),
            xi_mean: Array1::zeros(n),
        }
    }
}

/// All q-distribution parameters plus the current kernel hyperparameters.
///
/// The weight factor for neuron n is a Gaussian over vec(W_{:,n,:}) in
/// d-major layout (index d·M + m), matching the Kronecker structure
/// diag(τ) ⊗ K_W of the prior precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalState {
    /// Per latent dimension d: q(X_d) over the T bins.
    pub latents: Vec<GaussianVec>,
    /// Per neuron n: q(vec W_{:,n,:}), dimension M·D.
    pub weights: Vec<GaussianVec>,
    pub bias_mean: Array1<f64>,
    pub bias_var: Array1<f64>,
    /// PTN moments of the per-neuron dispersion.
    pub disp_mean: Array1<f64>,
    pub disp_second_moment: Array1<f64>,
    pub disp_log_mean: Array1<f64>,
    /// Per latent dimension: q(τ_d).
    pub ard: Vec<GammaParams>,
    pub bias_prec: GammaParams,
    pub aug: AugMoments,
    pub time_lengthscales: Vec<f64>,
    pub condition_lengthscales: Vec<f64>,
    pub likelihood: Likelihood,
    /// Per-neuron Bernoulli trial counts (binomial likelihood only).
    pub binomial_k: Option<Array1<f64>>,
}

impl VariationalState {
    pub fn n_latents(&self) -> usize {
        self.latents.len()
    }

    pub fn n_neurons(&self) -> usize {
        self.weights.len()
    }

    pub fn n_conditions(&self) -> usize {
        self.weights[0].mean.len() / self.latents.len()
    }

    pub fn n_bins(&self) -> usize {
        self.latents[0].mean.len()
    }

    /// Index of weight (m, d) inside the d-major vec layout.
    pub fn w_index(&self, m: usize, d: usize) -> usize {
        d * self.n_conditions() + m
    }

    pub fn weight_mean(&self, m: usize, n: usize, d: usize) -> f64 {
        self.weights[n].mean[self.w_index(m, d)]
    }

    pub fn ard_mean(&self, d: usize) -> f64 {
        self.ard[d].mean()
    }

    pub fn bias_prec_mean(&self) -> f64 {
        self.bias_prec.mean()
    }

    /// E[W_{m,n,d}] as an (M, N, D) array.
    pub fn weight_means(&self) -> Array3<f64> {
        let (m_count, n_count, d_count) =
            (self.n_conditions(), self.n_neurons(), self.n_latents());
        Array3::from_shape_fn((m_count, n_count, d_count), |(m, n, d)| {
            self.weight_mean(m, n, d)
        })
    }

    /// E[W²_{m,n,d}] as an (M, N, D) array.
    pub fn weight_second_moments(&self) -> Array3<f64> {
        let (m_count, n_count, d_count) =
            (self.n_conditions(), self.n_neurons(), self.n_latents());
        Array3::from_shape_fn((m_count, n_count, d_count), |(m, n, d)| {
            let i = self.w_index(m, d);
            let w = &self.weights[n];
            w.mean[i] * w.mean[i] + w.cov[[i, i]]
        })
    }

    /// First and second moments of F under the mean-field posterior.
    ///
    /// E[F] = E[β] + Σ_d E[W_d]E[X_d]; E[F²] adds the bias variance, the
    /// weight covariance block of the neuron, and the latent variances
    /// (cross-d latent products factorize since the q(X_d) are independent).
    pub fn f_moments(&self) -> FMoments {
        let (m_count, n_count, t_count, d_count) = (
            self.n_conditions(),
            self.n_neurons(),
            self.n_bins(),
            self.n_latents(),
        );
        let mut mean = Array3::zeros((m_count, n_count, t_count));
        let mut second = Array3::zeros((m_count, n_count, t_count));
        let mu: Vec<&[f64]> = self
            .latents
            .iter()
            .map(|g| g.mean.as_slice().expect("contiguous"))
            .collect();
        let var_t: Vec<Vec<f64>> = self
            .latents
            .iter()
            .map(|g| (0..t_count).map(|t| g.cov[[t, t]]).collect())
            .collect();
        // shared cross products μ_d[t]·μ_d'[t] for the weight-covariance term
        let mut mu_cross = vec![0.0f64; d_count * d_count * t_count];
        for d in 0..d_count {
            for d2 in 0..d_count {
                let row = &mut mu_cross[(d * d_count + d2) * t_count..][..t_count];
                for t in 0..t_count {
                    row[t] = mu[d][t] * mu[d2][t];
                }
            }
        }
        let mean_flat = mean.as_slice_mut().expect("contiguous");
        let second_flat = second.as_slice_mut().expect("contiguous");
        for m in 0..m_count {
            for n in 0..n_count {
                let w = &self.weights[n];
                let bias_m = self.bias_mean[n];
                let bias_var = self.bias_var[n];
                let off = (m * n_count + n) * t_count;
                let ef = &mut mean_flat[off..off + t_count];
                ef.fill(bias_m);
                for d in 0..d_count {
                    let wd = w.mean[d * m_count + m];
                    for (e, x) in ef.iter_mut().zip(mu[d]) {
                        *e += wd * x;
                    }
                }
                // E[F²] = Var(β) + E[F]² + μᵀ Cov_W μ + Σ_d E[W_d²]·Var(X_d)
                let ef2 = &mut second_flat[off..off + t_count];
                for (s, e) in ef2.iter_mut().zip(ef.iter()) {
                    *s = bias_var + e * e;
                }
                for d in 0..d_count {
                    let i = d * m_count + m;
                    let wd = w.mean[i];
                    let w2 = wd * wd + w.cov[[i, i]];
                    for (s, v) in ef2.iter_mut().zip(var_t[d].iter()) {
                        *s += w2 * v;
                    }
                    for d2 in 0..d_count {
                        let cov = w.cov[[i, d2 * m_count + m]];
                        if cov == 0.0 {
                            continue;
                        }
                        let row = &mu_cross[(d * d_count + d2) * t_count..][..t_count];
                        for (s, p) in ef2.iter_mut().zip(row) {
                            *s += cov * p;
                        }
                    }
                }
            }
        }
        FMoments { mean, second }
    }

    /// Shape checks against a dataset (used when resuming from checkpoints).
    pub fn check_compatible(&self, data: &SpikeTensor) -> Result<()> {
        if self.n_conditions() != data.n_conditions()
            || self.n_neurons() != data.n_neurons()
            || self.n_bins() != data.n_bins()
        {
            return Err(Error::invalid(format!(
                "state shape (M={}, N={}, T={}) does not match data (M={}, N={}, T={})",
                self.n_conditions(),
                self.n_neurons(),
                self.n_bins(),
                data.n_conditions(),
                data.n_neurons(),
                data.n_bins()
            )));
        }
        if self.condition_lengthscales.len() != data.condition_dim() {
            return Err(Error::invalid(
                "state condition-kernel dimension does not match data",
            ));
        }
        Ok(())
    }
}

/// Moments of the linear predictor per (condition, neuron, bin).
#[derive(Debug, Clone, PartialEq)]
pub struct FMoments {
    pub mean: Array3<f64>,
    pub second: Array3<f64>,
}

/// Prior Gram matrices at the current hyperparameters: one time kernel per
/// latent dimension plus the condition kernel.
#[derive(Debug, Clone)]
pub struct FitGrams {
    pub time: Vec<KernelGrams>,
    pub cond: KernelGrams,
}

/// Build the Gram set for the given lengthscales over the data's condition
/// coordinates and the unit time grid.
pub fn build_grams(
    condition_coords: &Array2<f64>,
    t_count: usize,
    time_lengthscales: &[f64],
    condition_lengthscales: &[f64],
    jitter: f64,
) -> Result<FitGrams> {
    let time_pts = unit_grid(t_count);
    let mut time = Vec::with_capacity(time_lengthscales.len());
    for &theta in time_lengthscales {
        let params = SeKernelParams::isotropic(theta)?;
        time.push(factorize(
            se_gram(time_pts.view(), time_pts.view(), &params),
            jitter,
        )?);
    }
    let params = SeKernelParams::new(condition_lengthscales.to_vec())?;
    let cond = factorize(
        se_gram(condition_coords.view(), condition_coords.view(), &params),
        jitter,
    )?;
    Ok(FitGrams { time, cond })
}

/// Initial variational state: latent factors at their GP priors, small
/// seeded random weight means to break the all-zero fixed point, biases at
/// the log empirical mean rate, dispersions at the empirical mean count, ARD
/// and bias precision at their priors, and augmentation moments from one
/// E-step pass.
pub fn initialize_state(data: &SpikeTensor, config: &ModelConfig) -> Result<VariationalState> {
    config.validate()?;
    if config.condition_lengthscales.len() != data.condition_dim() {
        return Err(Error::invalid(format!(
            "config has {} condition lengthscales but data has {} condition axes",
            config.condition_lengthscales.len(),
            data.condition_dim()
        )));
    }
    let (m_count, n_count, t_count, d_count) = (
        data.n_conditions(),
        data.n_neurons(),
        data.n_bins(),
        config.latents,
    );
    let time_lengthscales = config.initial_time_lengthscales();
    let grams = build_grams(
        &data.condition_coords,
        t_count,
        &time_lengthscales,
        &config.condition_lengthscales,
        config.jitter,
    )?;

    let latents = grams
        .time
        .iter()
        .map(|g| GaussianVec {
            mean: Array1::zeros(t_count),
            cov: g.jittered(),
        })
        .collect::<Vec<_>>();

    // weight prior covariance diag(E[τ])^{-1} ⊗ K_W with E[τ] at the prior
    let tau0 = config.ard_shape / config.ard_rate;
    let kw = grams.cond.jittered();
    let md = m_count * d_count;
    let mut w_cov0 = Array2::zeros((md, md));
    for d in 0..d_count {
        for i in 0..m_count {
            for j in 0..m_count {
                w_cov0[[d * m_count + i, d * m_count + j]] = kw[[i, j]] / tau0;
            }
        }
    }
    let weights = (0..n_count)
        .map(|n| {
            // per-neuron stream so draws follow neuron identity
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            );
            GaussianVec {
                mean: Array1::from_shape_fn(md, |_| 0.01 * rng.random_range(-1.0..1.0)),
                cov: w_cov0.clone(),
            }
        })
        .collect::<Vec<_>>();

    // per-neuron empirical mean counts over observed cells
    let mut mean_count = Array1::zeros(n_count);
    let mut max_count = Array1::zeros(n_count);
    for n in 0..n_count {
        let mut sum = 0.0;
        let mut cells = 0.0;
        let mut maxv = 0u32;
        for m in 0..m_count {
            let block = data.counts(m);
            for trial in 0..data.n_trials(m) {
                if !data.observed(m, trial, n) {
                    continue;
                }
                for t in 0..t_count {
                    let y = block[[trial, n, t]];
                    sum += y as f64;
                    cells += 1.0;
                    maxv = maxv.max(y);
                }
            }
        }
        mean_count[n] = if cells > 0.0 { sum / cells } else { 0.0 };
        max_count[n] = (maxv as f64).max(1.0);
    }

    let bias_mean = mean_count.mapv(|c: f64| c.max(f64::MIN_POSITIVE).ln().clamp(-10.0, 10.0));
    let disp_mean = mean_count.mapv(|c: f64| c.max(0.1));

    let mut state = VariationalState {
        latents,
        weights,
        bias_mean,
        bias_var: Array1::ones(n_count),
        disp_second_moment: &disp_mean * &disp_mean,
        disp_log_mean: disp_mean.mapv(f64::ln),
        disp_mean,
        ard: vec![
            GammaParams {
                shape: config.ard_shape,
                rate: config.ard_rate,
            };
            d_count
        ],
        bias_prec: GammaParams {
            shape: config.bias_prec_shape,
            rate: config.bias_prec_rate,
        },
        aug: AugMoments::zeros(m_count, n_count, t_count),
        time_lengthscales,
        condition_lengthscales: config.condition_lengthscales.clone(),
        likelihood: config.likelihood,
        binomial_k: match config.likelihood {
            Likelihood::Binomial => Some(max_count),
            Likelihood::NegBinomial => None,
        },
    };

    // one E-step pass over the augmentation factors
    let stats = infer::SuffStats::new(data);
    let fm = state.f_moments();
    infer::update_aug_gamma(&mut state, &stats);
    infer::update_aug_pig(&mut state);
    infer::update_aug_pg(&mut state, &stats, &fm);
    Ok(state)
}

/// Checkpoint file: everything needed to resume a fit mid-stream and land on
/// the same trajectory as an uninterrupted run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: VariationalState,
    pub monitor_history: Vec<f64>,
    /// Consecutive small-|Δmonitor| iterations toward the stopping rule.
    pub streak: usize,
}

impl Checkpoint {
    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::format(path, e.to_string()))?;
        ckpt.config.validate()?;
        Ok(ckpt)
    }
}
