//! The augmented variational-EM engine: closed-form coordinate updates for
//! every variational factor, gradient ascent on the kernel lengthscales, the
//! plug-in log-likelihood monitor, and the outer fit loop.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{pg_match_shape_slope, pg_mean_unit, pig_mean, GammaParams, PtnParams};
use crate::data::{Likelihood, SpikeTensor};
use crate::error::{Error, Result};
use crate::kernel::{
    factorize_fixed, se_gram, se_gram_grad_loglengthscale, unit_grid, SeKernelParams,
};
use crate::linalg;
use crate::special::{digamma, ln_cosh, ln_gamma, softplus, trigamma, EULER_GAMMA};
use crate::state::{
    build_grams, initialize_state, Checkpoint, FMoments, FitGrams, GaussianVec, ModelConfig,
    VariationalState,
};

/// Per-dataset sufficient statistics reused by every update: observed trial
/// counts, per-bin count sums over trials, and per-bin histograms of count
/// values (counts are small integers, so sums of ψ(y + r) over trials reduce
/// to a few digamma evaluations).
pub struct SuffStats {
    pub m_count: usize,
    pub n_count: usize,
    pub t_count: usize,
    /// Observed trials per (condition, neuron).
    pub trials_eff: Array2<f64>,
    /// Σ_trials y per (condition, neuron, bin), observed trials only.
    pub count_sum: Array3<f64>,
    /// (value, multiplicity) pairs per (condition, neuron, bin).
    hist: Vec<Vec<(u32, u32)>>,
    /// Per-neuron maximum observed count, floored at 1.
    pub max_count: Array1<f64>,
    /// Observed bins per neuron: Σ_m trials_eff · T.
    pub obs_per_neuron: Array1<f64>,
    /// Total observed bins.
    pub total_obs: f64,
}

impl SuffStats {
    pub fn new(data: &SpikeTensor) -> Self {
        let (m_count, n_count, t_count) = (data.n_conditions(), data.n_neurons(), data.n_bins());
        let mut trials_eff = Array2::<f64>::zeros((m_count, n_count));
        let mut count_sum = Array3::<f64>::zeros((m_count, n_count, t_count));
        let mut hist = vec![Vec::new(); m_count * n_count * t_count];
        let mut max_count = Array1::<f64>::zeros(n_count);
        for m in 0..m_count {
            let block = data.counts(m);
            for n in 0..n_count {
                let mut r_eff = 0.0;
                for trial in 0..data.n_trials(m) {
                    if !data.observed(m, trial, n) {
                        continue;
                    }
                    r_eff += 1.0;
                    for t in 0..t_count {
                        let y = block[[trial, n, t]];
                        count_sum[[m, n, t]] += y as f64;
                        max_count[n] = max_count[n].max(y as f64);
                        let cell = &mut hist[(m * n_count + n) * t_count + t];
                        match cell.iter_mut().find(|(v, _)| *v == y) {
                            Some((_, c)) => *c += 1,
                            None => cell.push((y, 1)),
                        }
                    }
                }
                trials_eff[[m, n]] = r_eff;
            }
        }
        for cell in hist.iter_mut() {
            cell.sort_unstable_by_key(|(v, _)| *v);
        }
        let obs_per_neuron = Array1::from_shape_fn(n_count, |n| {
            (0..m_count).map(|m| trials_eff[[m, n]]).sum::<f64>() * t_count as f64
        });
        let total_obs = obs_per_neuron.sum();
        let max_count = max_count.mapv(|v: f64| v.max(1.0));
        SuffStats {
            m_count,
            n_count,
            t_count,
            trials_eff,
            count_sum,
            hist,
            max_count,
            obs_per_neuron,
            total_obs,
        }
    }

    pub fn hist(&self, m: usize, n: usize, t: usize) -> &[(u32, u32)] {
        &self.hist[(m * self.n_count + n) * self.t_count + t]
    }
}

/// E[log τ̂] for one observation under the augmented-Gamma factor
/// q(τ̂) = Γ(y + E[r], 1): ψ(y + E[r]) − log 1.
pub fn aug_log_tau_moment(y: f64, disp_mean: f64) -> f64 {
    digamma(y + disp_mean)
}

/// Update the augmented-Gamma log moments (negative binomial only).
pub fn update_aug_gamma(state: &mut VariationalState, stats: &SuffStats) {
    if state.likelihood != Likelihood::NegBinomial {
        return;
    }
    for m in 0..stats.m_count {
        for n in 0..stats.n_count {
            let r_mean = state.disp_mean[n];
            for t in 0..stats.t_count {
                let mut s = 0.0;
                for &(y, cnt) in stats.hist(m, n, t) {
                    s += cnt as f64 * aug_log_tau_moment(y as f64, r_mean);
                }
                state.aug.log_tau_sum[[m, n, t]] = s;
            }
        }
    }
}

/// Update the P-IG means E[ξ_n] at tilt √E[r_n²] (negative binomial only).
pub fn update_aug_pig(state: &mut VariationalState) {
    if state.likelihood != Likelihood::NegBinomial {
        return;
    }
    for n in 0..state.n_neurons() {
        state.aug.xi_mean[n] = pig_mean(state.disp_second_moment[n].max(0.0).sqrt());
    }
}

/// Update the PG moments at tilt √E[F²] and refresh the trial-reduced sums A
/// and B. For the negative binomial the PG shape is y + E[r_n]; for the
/// binomial it is k_n, and the pseudo-observation numerator is y − k_n/2
/// instead of (y − E[r_n])/2.
pub fn update_aug_pg(state: &mut VariationalState, stats: &SuffStats, fm: &FMoments) {
    let binomial_k = state.binomial_k.clone();
    for m in 0..stats.m_count {
        for n in 0..stats.n_count {
            let r_eff = stats.trials_eff[[m, n]];
            for t in 0..stats.t_count {
                let c = fm.second[[m, n, t]].max(0.0).sqrt();
                let g = pg_mean_unit(c);
                let s_y = stats.count_sum[[m, n, t]];
                state.aug.omega_scale[[m, n, t]] = g;
                match state.likelihood {
                    Likelihood::NegBinomial => {
                        let r_mean = state.disp_mean[n];
                        state.aug.omega_sum[[m, n, t]] = g * (s_y + r_eff * r_mean);
                        state.aug.pseudo_sum[[m, n, t]] = 0.5 * (s_y - r_eff * r_mean);
                    }
                    Likelihood::Binomial => {
                        let k = binomial_k.as_ref().expect("binomial trial counts")[n];
                        state.aug.omega_sum[[m, n, t]] = g * r_eff * k;
                        state.aug.pseudo_sum[[m, n, t]] = s_y - 0.5 * r_eff * k;
                    }
                }
            }
        }
    }
}

/// E[X_{d,t} X_{d',t}] as a (D, D, T) array: means cross, variances on the
/// diagonal blocks only (the q(X_d) factors are independent).
fn latent_second_moments(state: &VariationalState) -> Array3<f64> {
    let (d_count, t_count) = (state.n_latents(), state.n_bins());
    let mut out = Array3::zeros((d_count, d_count, t_count));
    for d in 0..d_count {
        for d2 in 0..d_count {
            for t in 0..t_count {
                let v = state.latents[d].mean[t] * state.latents[d2].mean[t]
                    + if d == d2 {
                        state.latents[d].cov[[t, t]]
                    } else {
                        0.0
                    };
                out[[d, d2, t]] = v;
            }
        }
    }
    out
}

/// Coordinate update of every per-neuron weight factor q(vec W_{:,n,:}).
///
/// Precision: diag(E[τ]) ⊗ K_W⁻¹ plus the likelihood term, block diagonal in
/// the condition index with (d,d') entries Σ_t E[X_d X_d']·A[m,n,t]. Linear
/// term: Σ_t E[X_d]·(B − A·E[β_n]) per (m,d).
pub fn update_q_w(state: &mut VariationalState, grams: &FitGrams) -> Result<()> {
    let (m_count, n_count, d_count) = (state.n_conditions(), state.n_neurons(), state.n_latents());
    let t_count = state.n_bins();
    let md = m_count * d_count;
    let kw_inv = grams.cond.inverse();
    let xx = latent_second_moments(state);
    let xx_flat = xx.as_slice().expect("contiguous");
    let a_flat = state.aug.omega_sum.as_slice().expect("contiguous");
    let b_flat = state.aug.pseudo_sum.as_slice().expect("contiguous");
    let mu: Vec<&[f64]> = state
        .latents
        .iter()
        .map(|g| g.mean.as_slice().expect("contiguous"))
        .collect();
    let tau: Vec<f64> = (0..d_count).map(|d| state.ard_mean(d)).collect();

    let results: Vec<Result<GaussianVec>> = (0..n_count)
        .into_par_iter()
        .map(|n| {
            let mut phi1 = Array2::<f64>::zeros((md, md));
            for d in 0..d_count {
                for i in 0..m_count {
                    for j in 0..m_count {
                        phi1[[d * m_count + i, d * m_count + j]] = tau[d] * kw_inv[[i, j]];
                    }
                }
            }
            let mut phi2 = Array1::<f64>::zeros(md);
            let beta = state.bias_mean[n];
            for m in 0..m_count {
                let off = (m * n_count + n) * t_count;
                let a_row = &a_flat[off..off + t_count];
                let b_row = &b_flat[off..off + t_count];
                for d in 0..d_count {
                    for d2 in 0..d_count {
                        let xrow = &xx_flat[(d * d_count + d2) * t_count..][..t_count];
                        let mut s = 0.0;
                        for (x, a) in xrow.iter().zip(a_row) {
                            s += x * a;
                        }
                        phi1[[d * m_count + m, d2 * m_count + m]] += s;
                    }
                    let mut lin = 0.0;
                    for ((x, b), a) in mu[d].iter().zip(b_row).zip(a_row) {
                        lin += x * (b - a * beta);
                    }
                    phi2[d * m_count + m] = lin;
                }
            }
            let chol = linalg::cholesky(phi1.view()).ok_or_else(|| {
                Error::numerical(format!("weight precision for neuron {n} is not PD"))
            })?;
            let cov = linalg::chol_inverse(&chol);
            let mean = cov.dot(&phi2);
            Ok(GaussianVec { mean, cov })
        })
        .collect();

    for (n, res) in results.into_iter().enumerate() {
        state.weights[n] = res?;
    }
    Ok(())
}

/// Sequential coordinate update of the latent factors q(X_d); each dimension
/// regresses the residual left by the others.
pub fn update_q_x(state: &mut VariationalState, grams: &FitGrams) -> Result<()> {
    let (m_count, n_count, t_count, d_count) = (
        state.n_conditions(),
        state.n_neurons(),
        state.n_bins(),
        state.n_latents(),
    );
    let wm = state.weight_means();
    let w2 = state.weight_second_moments();
    let a_flat = state.aug.omega_sum.as_slice().expect("contiguous");
    let b_flat = state.aug.pseudo_sum.as_slice().expect("contiguous");

    // running Σ_d E[W_{m,n,d}]·μ_d[t]
    let mut proj = vec![0.0f64; m_count * n_count * t_count];
    for m in 0..m_count {
        for n in 0..n_count {
            let row = &mut proj[(m * n_count + n) * t_count..][..t_count];
            for d in 0..d_count {
                let w = wm[[m, n, d]];
                let mu = state.latents[d].mean.as_slice().expect("contiguous");
                for (p, x) in row.iter_mut().zip(mu) {
                    *p += w * x;
                }
            }
        }
    }

    for d in 0..d_count {
        let mu_old = state.latents[d].mean.clone();
        let mu_old_s = mu_old.as_slice().expect("contiguous");
        let mut prec_diag = vec![0.0f64; t_count];
        let mut lin = Array1::<f64>::zeros(t_count);
        let lin_s = lin.as_slice_mut().expect("contiguous");
        for m in 0..m_count {
            for n in 0..n_count {
                let w_mean = wm[[m, n, d]];
                let w_sq = w2[[m, n, d]];
                let beta = state.bias_mean[n];
                let off = (m * n_count + n) * t_count;
                let a_row = &a_flat[off..off + t_count];
                let b_row = &b_flat[off..off + t_count];
                let p_row = &proj[off..off + t_count];
                for t in 0..t_count {
                    let a = a_row[t];
                    prec_diag[t] += w_sq * a;
                    let other = p_row[t] - w_mean * mu_old_s[t];
                    lin_s[t] += w_mean * (b_row[t] - a * (beta + other));
                }
            }
        }
        let mut phi1 = grams.time[d].inverse();
        for t in 0..t_count {
            phi1[[t, t]] += prec_diag[t];
        }
        let chol = linalg::cholesky(phi1.view()).ok_or_else(|| {
            Error::numerical(format!("latent precision for dimension {d} is not PD"))
        })?;
        let cov = linalg::chol_inverse(&chol);
        let mean = cov.dot(&lin);
        let mean_s = mean.as_slice().expect("contiguous");
        // refresh the residual projection with the new mean
        for m in 0..m_count {
            for n in 0..n_count {
                let w_mean = wm[[m, n, d]];
                let row = &mut proj[(m * n_count + n) * t_count..][..t_count];
                for t in 0..t_count {
                    row[t] += w_mean * (mean_s[t] - mu_old_s[t]);
                }
            }
        }
        state.latents[d] = GaussianVec { mean, cov };
    }
    Ok(())
}

/// Coordinate update of the per-neuron bias factors.
pub fn update_q_beta(state: &mut VariationalState) {
    let (m_count, n_count, t_count, d_count) = (
        state.n_conditions(),
        state.n_neurons(),
        state.n_bins(),
        state.n_latents(),
    );
    let tau_beta = state.bias_prec_mean();
    let wm = state.weight_means();
    let a_flat = state.aug.omega_sum.as_slice().expect("contiguous");
    let b_flat = state.aug.pseudo_sum.as_slice().expect("contiguous");
    let mut projection = vec![0.0f64; t_count];
    for n in 0..n_count {
        let mut prec = tau_beta;
        let mut lin = 0.0;
        for m in 0..m_count {
            projection.fill(0.0);
            for d in 0..d_count {
                let w = wm[[m, n, d]];
                let mu = state.latents[d].mean.as_slice().expect("contiguous");
                for (p, x) in projection.iter_mut().zip(mu) {
                    *p += w * x;
                }
            }
            let off = (m * n_count + n) * t_count;
            let a_row = &a_flat[off..off + t_count];
            let b_row = &b_flat[off..off + t_count];
            for t in 0..t_count {
                prec += a_row[t];
                lin += b_row[t] - a_row[t] * projection[t];
            }
        }
        let var = 1.0 / prec;
        state.bias_var[n] = var;
        state.bias_mean[n] = var * lin;
    }
}

/// Coordinate update of the shared bias precision q(τ_β).
pub fn update_q_tau_beta(state: &mut VariationalState, config: &ModelConfig) {
    let n_count = state.n_neurons();
    let sum_sq: f64 = (0..n_count)
        .map(|n| state.bias_mean[n] * state.bias_mean[n] + state.bias_var[n])
        .sum();
    state.bias_prec = GammaParams {
        shape: config.bias_prec_shape + n_count as f64 / 2.0,
        rate: config.bias_prec_rate + 0.5 * sum_sq,
    };
}

/// Coordinate update of the ARD precisions q(τ_d): shape α_d + MN/2, rate
/// β_d + ½ Σ_n E[w_{n,d}ᵀ K_W⁻¹ w_{n,d}] with the quadratic expectation
/// E[wᵀKw] = meanᵀK mean + tr(K·Cov).
pub fn update_q_ard(state: &mut VariationalState, grams: &FitGrams, config: &ModelConfig) {
    let (m_count, n_count, d_count) = (state.n_conditions(), state.n_neurons(), state.n_latents());
    let kw_inv = grams.cond.inverse();
    for d in 0..d_count {
        let mut quad = 0.0;
        for n in 0..n_count {
            let w = &state.weights[n];
            let off = d * m_count;
            for i in 0..m_count {
                for j in 0..m_count {
                    quad += kw_inv[[i, j]]
                        * (w.mean[off + i] * w.mean[off + j] + w.cov[[off + j, off + i]]);
                }
            }
        }
        state.ard[d] = GammaParams {
            shape: config.ard_shape + (m_count * n_count) as f64 / 2.0,
            rate: config.ard_rate + 0.5 * quad,
        };
    }
}

/// Taylor target for the dispersion update: h(r) = α'(r)·ψ(ᾱ) − ln Γ(α'(r))
/// where α'(r) = (y + r)·(∂α/∂b)(c) is the matched-Gamma shape of
/// PG(y + r, c) and ᾱ = α'(E[r]). Exposed so tests can difference it.
pub fn dispersion_h(r: f64, y: f64, r_mean: f64, tilt: f64) -> f64 {
    let slope = pg_match_shape_slope(tilt);
    let alpha_bar = (y + r_mean) * slope;
    let alpha_r = (y + r) * slope;
    alpha_r * digamma(alpha_bar) - ln_gamma(alpha_r)
}

/// |h″(E[r])| = (∂α/∂b)²·ψ′(ᾱ), by the chain rule.
pub fn dispersion_curvature(y: f64, r_mean: f64, tilt: f64) -> f64 {
    let slope = pg_match_shape_slope(tilt);
    let alpha_bar = (y + r_mean) * slope;
    slope * slope * trigamma(alpha_bar)
}

/// Coordinate update of the dispersion factors q(r_n) (negative binomial
/// only): assemble the PTN parameters from the augmented moments, the
/// per-observation Taylor curvature of the PG cross-entropy, and the current
/// moments of F, then integrate for the new moments.
pub fn update_q_r(state: &mut VariationalState, stats: &SuffStats, fm: &FMoments) -> Result<()> {
    if state.likelihood != Likelihood::NegBinomial {
        return Ok(());
    }
    let (m_count, n_count, t_count) = (stats.m_count, stats.n_count, stats.t_count);
    let updated: Vec<Result<(f64, f64, f64)>> = (0..n_count)
        .into_par_iter()
        .map(|n| {
            let r_mean = state.disp_mean[n];
            let xi = state.aug.xi_mean[n];
            let p = stats.obs_per_neuron[n];
            if p == 0.0 {
                return Ok((
                    r_mean,
                    state.disp_second_moment[n],
                    state.disp_log_mean[n],
                ));
            }
            let mut b_lin = p * (EULER_GAMMA - std::f64::consts::LN_2);
            let mut taylor = 0.0;
            for m in 0..m_count {
                let r_eff = stats.trials_eff[[m, n]];
                if r_eff == 0.0 {
                    continue;
                }
                for t in 0..t_count {
                    let c = fm.second[[m, n, t]].max(0.0).sqrt();
                    b_lin += state.aug.log_tau_sum[[m, n, t]];
                    b_lin -= 0.5 * r_eff * fm.mean[[m, n, t]];
                    b_lin -= r_eff * ln_cosh(0.5 * c);
                    for &(y, cnt) in stats.hist(m, n, t) {
                        taylor += cnt as f64 * dispersion_curvature(y as f64, r_mean, c);
                    }
                }
            }
            let a = p * xi + 0.5 * taylor;
            b_lin += taylor * r_mean;
            let params = PtnParams::new(p, a, b_lin)?;
            let moments = crate::augment::ptn_moments(&params)?;
            let mean = moments.mean.max(1e-8);
            Ok((
                mean,
                moments.second_moment.max(mean * mean),
                moments.log_mean,
            ))
        })
        .collect();
    for (n, res) in updated.into_iter().enumerate() {
        let (mean, second, log_mean) = res?;
        state.disp_mean[n] = mean;
        state.disp_second_moment[n] = second;
        state.disp_log_mean[n] = log_mean;
    }
    Ok(())
}

/// Plug-in log-likelihood of `data` at the posterior means, normalized per
/// observed bin (trials × conditions × neurons × bins).
pub fn monitor(state: &VariationalState, data: &SpikeTensor) -> Result<f64> {
    state.check_compatible(data)?;
    let stats = SuffStats::new(data);
    Ok(monitor_with(state, &stats))
}

pub(crate) fn monitor_with(state: &VariationalState, stats: &SuffStats) -> f64 {
    let fm = state.f_moments();
    plugin_loglik_total(
        &fm.mean,
        state.likelihood,
        &state.disp_mean,
        state.binomial_k.as_ref(),
        stats,
    ) / stats.total_obs
}

/// Total log-likelihood of the observed counts at a fixed linear predictor
/// and dispersion/trial-count parameters.
pub(crate) fn plugin_loglik_total(
    f: &Array3<f64>,
    likelihood: Likelihood,
    disp: &Array1<f64>,
    binomial_k: Option<&Array1<f64>>,
    stats: &SuffStats,
) -> f64 {
    let (m_count, n_count, t_count) = (stats.m_count, stats.n_count, stats.t_count);
    let per_neuron: Vec<f64> = (0..n_count)
        .into_par_iter()
        .map(|n| {
            let mut total = 0.0;
            match likelihood {
                Likelihood::NegBinomial => {
                    let r = disp[n];
                    let lg_r = ln_gamma(r);
                    for m in 0..m_count {
                        let r_eff = stats.trials_eff[[m, n]];
                        if r_eff == 0.0 {
                            continue;
                        }
                        for t in 0..t_count {
                            let fv = f[[m, n, t]];
                            let s_y = stats.count_sum[[m, n, t]];
                            let mut cell = 0.0;
                            for &(y, cnt) in stats.hist(m, n, t) {
                                let yf = y as f64;
                                cell +=
                                    cnt as f64 * (ln_gamma(yf + r) - lg_r - ln_gamma(yf + 1.0));
                            }
                            cell += s_y * fv - (s_y + r_eff * r) * softplus(fv);
                            total += cell;
                        }
                    }
                }
                Likelihood::Binomial => {
                    let k = binomial_k.expect("binomial trial counts")[n];
                    let lg_k1 = ln_gamma(k + 1.0);
                    for m in 0..m_count {
                        let r_eff = stats.trials_eff[[m, n]];
                        if r_eff == 0.0 {
                            continue;
                        }
                        for t in 0..t_count {
                            let fv = f[[m, n, t]];
                            let s_y = stats.count_sum[[m, n, t]];
                            let mut cell = 0.0;
                            for &(y, cnt) in stats.hist(m, n, t) {
                                let yf = y as f64;
                                cell += cnt as f64
                                    * (lg_k1 - ln_gamma(yf + 1.0) - ln_gamma(k - yf + 1.0));
                            }
                            cell += s_y * fv - r_eff * k * softplus(fv);
                            total += cell;
                        }
                    }
                }
            }
            total
        })
        .collect();
    per_neuron.into_iter().sum()
}

/// The lengthscale-dependent terms of the bound, precomputed so the line
/// search only refactorizes kernels: per latent dimension the scatter
/// S_d = Σ_d + μ_dμ_dᵀ, for the condition kernel the τ-weighted weight
/// scatter T_W = Σ_n Σ_d E[τ_d]·(V_n^{(dd)} + m_{n,d} m_{n,d}ᵀ).
pub struct MstepProblem {
    pub latent_scatter: Vec<Array2<f64>>,
    pub weight_scatter: Array2<f64>,
    /// N·D multiplier of the condition-kernel log determinant.
    pub logdet_weight: f64,
    pub time_pts: Array2<f64>,
    pub cond_pts: Array2<f64>,
    /// Jitters frozen for the duration of one m-step so the objective is a
    /// smooth function of the lengthscales.
    pub jit_time: Vec<f64>,
    pub jit_cond: f64,
}

impl MstepProblem {
    pub fn from_state(
        state: &VariationalState,
        grams: &FitGrams,
        condition_coords: &Array2<f64>,
    ) -> Self {
        let (m_count, n_count, d_count) =
            (state.n_conditions(), state.n_neurons(), state.n_latents());
        let latent_scatter = state
            .latents
            .iter()
            .map(|g| {
                let mut s = g.cov.clone();
                let t_count = g.mean.len();
                for i in 0..t_count {
                    for j in 0..t_count {
                        s[[i, j]] += g.mean[i] * g.mean[j];
                    }
                }
                s
            })
            .collect();
        let mut weight_scatter = Array2::<f64>::zeros((m_count, m_count));
        for n in 0..n_count {
            let w = &state.weights[n];
            for d in 0..d_count {
                let tau = state.ard_mean(d);
                let off = d * m_count;
                for i in 0..m_count {
                    for j in 0..m_count {
                        weight_scatter[[i, j]] += tau
                            * (w.cov[[off + i, off + j]] + w.mean[off + i] * w.mean[off + j]);
                    }
                }
            }
        }
        MstepProblem {
            latent_scatter,
            weight_scatter,
            logdet_weight: (n_count * d_count) as f64,
            time_pts: unit_grid(state.n_bins()),
            cond_pts: condition_coords.clone(),
            jit_time: grams.time.iter().map(|g| g.jitter_used).collect(),
            jit_cond: grams.cond.jitter_used,
        }
    }

    /// −½ Σ_d [tr(K_d⁻¹S_d) + log|K_d|] − ½ [tr(K_W⁻¹T_W) + N·D·log|K_W|],
    /// or None when a kernel is not PD at the frozen jitter.
    pub fn objective(&self, theta_log: &[f64], ell_log: &[f64]) -> Option<f64> {
        let per_dim: Vec<Option<f64>> = self
            .latent_scatter
            .par_iter()
            .enumerate()
            .map(|(d, s)| {
                let params = SeKernelParams::isotropic(theta_log[d].exp()).ok()?;
                let k = se_gram(self.time_pts.view(), self.time_pts.view(), &params);
                let g = factorize_fixed(&k, self.jit_time[d])?;
                let tr = linalg::chol_solve_mat(&g.chol, s.view()).diag().sum();
                Some(-0.5 * (tr + g.log_det))
            })
            .collect();
        let mut total = 0.0;
        for v in per_dim {
            total += v?;
        }
        let ell: Vec<f64> = ell_log.iter().map(|v| v.exp()).collect();
        let params = SeKernelParams::new(ell).ok()?;
        let k = se_gram(self.cond_pts.view(), self.cond_pts.view(), &params);
        let g = factorize_fixed(&k, self.jit_cond)?;
        let tr = linalg::chol_solve_mat(&g.chol, self.weight_scatter.view())
            .diag()
            .sum();
        total += -0.5 * (tr + self.logdet_weight * g.log_det);
        Some(total)
    }

    /// Analytic gradient of `objective` with respect to (log θ_d, log ℓ_k):
    /// ½ tr(K⁻¹ G K⁻¹ S) − ½·w·tr(K⁻¹ G) per kernel, with G = ∂K/∂log ℓ.
    pub fn gradient(&self, theta_log: &[f64], ell_log: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let per_dim: Vec<Option<f64>> = self
            .latent_scatter
            .par_iter()
            .enumerate()
            .map(|(d, s)| {
                let params = SeKernelParams::isotropic(theta_log[d].exp()).ok()?;
                let k = se_gram(self.time_pts.view(), self.time_pts.view(), &params);
                let grams = factorize_fixed(&k, self.jit_time[d])?;
                let grad_k = &se_gram_grad_loglengthscale(self.time_pts.view(), &params)[0];
                Some(kernel_direction_grad(&grams.chol, grad_k, s, 1.0))
            })
            .collect();
        let mut g_theta = Vec::with_capacity(theta_log.len());
        for v in per_dim {
            g_theta.push(v?);
        }
        let ell: Vec<f64> = ell_log.iter().map(|v| v.exp()).collect();
        let params = SeKernelParams::new(ell).ok()?;
        let k = se_gram(self.cond_pts.view(), self.cond_pts.view(), &params);
        let grams = factorize_fixed(&k, self.jit_cond)?;
        let grads = se_gram_grad_loglengthscale(self.cond_pts.view(), &params);
        let g_ell = grads
            .iter()
            .map(|gk| {
                kernel_direction_grad(&grams.chol, gk, &self.weight_scatter, self.logdet_weight)
            })
            .collect();
        Some((g_theta, g_ell))
    }
}

/// ½ tr(K⁻¹ G K⁻¹ S) − ½·w·tr(K⁻¹ G) from the Cholesky factor of K.
fn kernel_direction_grad(
    chol: &Array2<f64>,
    grad_k: &Array2<f64>,
    scatter: &Array2<f64>,
    logdet_weight: f64,
) -> f64 {
    let kinv_g = linalg::chol_solve_mat(chol, grad_k.view());
    let kinv_s = linalg::chol_solve_mat(chol, scatter.view());
    let n = chol.nrows();
    let mut tr_gs = 0.0;
    for i in 0..n {
        for j in 0..n {
            tr_gs += kinv_g[[i, j]] * kinv_s[[j, i]];
        }
    }
    0.5 * tr_gs - 0.5 * logdet_weight * kinv_g.diag().sum()
}

/// Gradient ascent with backtracking on the kernel lengthscales; updates the
/// state's hyperparameters and returns freshly factorized Grams.
pub fn m_step(
    state: &mut VariationalState,
    grams: &FitGrams,
    config: &ModelConfig,
    condition_coords: &Array2<f64>,
) -> Result<FitGrams> {
    let problem = MstepProblem::from_state(state, grams, condition_coords);

    let mut theta_log: Vec<f64> = state.time_lengthscales.iter().map(|v| v.ln()).collect();
    let mut ell_log: Vec<f64> = state
        .condition_lengthscales
        .iter()
        .map(|v| v.ln())
        .collect();
    let mut obj = problem
        .objective(&theta_log, &ell_log)
        .ok_or_else(|| Error::numerical("hyperparameter objective undefined at incumbent"))?;

    for _ in 0..config.mstep_steps {
        let Some((g_theta, g_ell)) = problem.gradient(&theta_log, &ell_log) else {
            break;
        };
        let mut step = config.mstep_step_size;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_theta: Vec<f64> = theta_log
                .iter()
                .zip(&g_theta)
                .map(|(x, g)| x + step * g)
                .collect();
            let cand_ell: Vec<f64> = ell_log
                .iter()
                .zip(&g_ell)
                .map(|(x, g)| x + step * g)
                .collect();
            if let Some(cand_obj) = problem.objective(&cand_theta, &cand_ell) {
                if cand_obj >= obj {
                    theta_log = cand_theta;
                    ell_log = cand_ell;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    state.time_lengthscales = theta_log.iter().map(|v| v.exp()).collect();
    state.condition_lengthscales = ell_log.iter().map(|v| v.exp()).collect();
    build_grams(
        condition_coords,
        state.n_bins(),
        &state.time_lengthscales,
        &state.condition_lengthscales,
        config.jitter,
    )
}

/// Fit summary. Wall-clock fields are carried in memory for the monitor
/// trace but excluded from the serialized report so reports from identical
/// runs are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Per-iteration monitor values (mean per-bin log-likelihood at the
    /// posterior means).
    pub monitor: Vec<f64>,
    pub iterations_run: usize,
    pub final_time_lengthscales: Vec<f64>,
    pub final_condition_lengthscales: Vec<f64>,
    /// Latent dimensions whose loading energy exceeds 1% of the largest.
    pub retained_dims: Vec<usize>,
    #[serde(skip)]
    pub wall_time_secs: f64,
    /// Cumulative seconds at the end of each iteration.
    #[serde(skip)]
    pub iter_seconds: Vec<f64>,
}

/// Loading energy per latent dimension: E[τ_d]^{-1/2} · max_n ‖E[W_{:,n,d}]‖.
pub fn loading_energies(state: &VariationalState) -> Vec<f64> {
    let (m_count, n_count, d_count) = (state.n_conditions(), state.n_neurons(), state.n_latents());
    (0..d_count)
        .map(|d| {
            let mut max_norm: f64 = 0.0;
            for n in 0..n_count {
                let off = d * m_count;
                let norm = state.weights[n]
                    .mean
                    .slice(ndarray::s![off..off + m_count])
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                max_norm = max_norm.max(norm);
            }
            max_norm / state.ard_mean(d).sqrt()
        })
        .collect()
}

/// Dimensions with loading energy above 1% of the maximum.
pub fn retained_dims(state: &VariationalState) -> Vec<usize> {
    let energies = loading_energies(state);
    let max = energies.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Vec::new();
    }
    energies
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > 0.01 * max)
        .map(|(d, _)| d)
        .collect()
}

/// Number of consecutive converged iterations required to stop.
const CONVERGENCE_STREAK: usize = 5;

/// Run the full variational EM loop from a fresh initialization.
pub fn fit(data: &SpikeTensor, config: &ModelConfig) -> Result<(VariationalState, FitReport)> {
    let state = initialize_state(data, config)?;
    fit_from(data, config, state, Vec::new(), 0)
}

/// Resume a fit from a checkpoint; with identical data this continues the
/// exact trajectory of the interrupted run.
pub fn fit_resume(
    data: &SpikeTensor,
    checkpoint: Checkpoint,
) -> Result<(VariationalState, FitReport)> {
    checkpoint.state.check_compatible(data)?;
    fit_from(
        data,
        &checkpoint.config,
        checkpoint.state,
        checkpoint.monitor_history,
        checkpoint.streak,
    )
}

/// Shared fit driver. `history` holds monitor values of already-completed
/// iterations; the loop continues until `config.max_iters` total iterations
/// or until |Δmonitor| < tol for five consecutive iterations.
pub fn fit_from(
    data: &SpikeTensor,
    config: &ModelConfig,
    mut state: VariationalState,
    mut history: Vec<f64>,
    mut streak: usize,
) -> Result<(VariationalState, FitReport)> {
    config.validate()?;
    state.check_compatible(data)?;
    let start = Instant::now();
    let stats = SuffStats::new(data);
    let mut grams = build_grams(
        &data.condition_coords,
        state.n_bins(),
        &state.time_lengthscales,
        &state.condition_lengthscales,
        config.jitter,
    )?;
    let mut iter_seconds = Vec::new();

    while history.len() < config.max_iters {
        let fm = state.f_moments();
        update_aug_gamma(&mut state, &stats);
        update_aug_pig(&mut state);
        update_aug_pg(&mut state, &stats, &fm);
        update_q_w(&mut state, &grams)?;
        update_q_x(&mut state, &grams)?;
        update_q_beta(&mut state);
        update_q_tau_beta(&mut state, config);
        if state.likelihood == Likelihood::NegBinomial {
            let fm_fresh = state.f_moments();
            update_q_r(&mut state, &stats, &fm_fresh)?;
        }
        update_q_ard(&mut state, &grams, config);
        grams = m_step(&mut state, &grams, config, &data.condition_coords)?;

        let value = monitor_with(&state, &stats);
        if !value.is_finite() {
            return Err(Error::numerical(format!(
                "monitor became non-finite at iteration {}",
                history.len()
            )));
        }
        let delta = history.last().map(|prev| (value - prev).abs());
        history.push(value);
        iter_seconds.push(start.elapsed().as_secs_f64());
        streak = match delta {
            Some(d) if d < config.tol => streak + 1,
            Some(_) => 0,
            None => 0,
        };
        if streak >= CONVERGENCE_STREAK {
            break;
        }
    }

    let report = FitReport {
        iterations_run: history.len(),
        monitor: history,
        final_time_lengthscales: state.time_lengthscales.clone(),
        final_condition_lengthscales: state.condition_lengthscales.clone(),
        retained_dims: retained_dims(&state),
        wall_time_secs: start.elapsed().as_secs_f64(),
        iter_seconds,
    };
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GenerativeSpec};
    use crate::state::initialize_state;
    use ndarray::Array3 as NdArray3;

    fn gen_spec(seed: u64) -> GenerativeSpec {
        GenerativeSpec {
            conditions: 3,
            neurons: 4,
            time_bins: 6,
            latent_dims: 2,
            condition_dim: 1,
            time_lengthscales: vec![0.2, 0.35],
            condition_lengthscales: vec![0.5],
            dispersion_range: (0.0, 5.0),
            trials_per_condition: 4,
            bias_mean: -0.5,
            bias_scale: 0.5,
            weight_scale: 0.6,
            bin_width: 1.0,
            seed,
            likelihood: Likelihood::NegBinomial,
            binomial_trials: 8,
        }
    }

    fn small_setup() -> (
        SpikeTensor,
        ModelConfig,
        VariationalState,
        FitGrams,
        SuffStats,
    ) {
        let data = generate_synthetic(&gen_spec(3)).unwrap().0;
        let config = ModelConfig {
            latents: 2,
            condition_lengthscales: vec![0.4],
            seed: 11,
            ..ModelConfig::default()
        };
        let state = initialize_state(&data, &config).unwrap();
        let grams = build_grams(
            &data.condition_coords,
            data.n_bins(),
            &state.time_lengthscales,
            &state.condition_lengthscales,
            config.jitter,
        )
        .unwrap();
        let stats = SuffStats::new(&data);
        (data, config, state, grams, stats)
    }

    #[test]
    fn aug_gamma_digamma_values() {
        // ψ(1) = −γ; ψ(5) = −γ + 1 + 1/2 + 1/3 + 1/4
        assert!((aug_log_tau_moment(0.0, 1.0) + EULER_GAMMA).abs() < 1e-12);
        let want = -EULER_GAMMA + 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        assert!((aug_log_tau_moment(3.0, 2.0) - want).abs() < 1e-12);
        assert!((aug_log_tau_moment(3.0, 2.0) - 1.506_117_668_431_8).abs() < 1e-10);
        // increasing in y at fixed dispersion
        let mut prev = f64::NEG_INFINITY;
        for y in 0..6 {
            let v = aug_log_tau_moment(y as f64, 1.3);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn aug_pig_values_and_monotonicity() {
        let (_, _, mut state, _, _) = small_setup();
        state.disp_second_moment.fill(1.0);
        update_aug_pig(&mut state);
        assert!((state.aug.xi_mean[0] - 0.5).abs() < 1e-12);
        state.disp_second_moment.fill(1e-14);
        update_aug_pig(&mut state);
        let pi2_12 = std::f64::consts::PI.powi(2) / 12.0;
        assert!((state.aug.xi_mean[0] - pi2_12).abs() < 1e-7);
        state.disp_second_moment.fill(9.0);
        update_aug_pig(&mut state);
        assert!(state.aug.xi_mean[0] < 0.5);
    }

    #[test]
    fn aug_pg_values() {
        // zero tilt, y = 0, E[r] = 1: E[ω] = 1/4
        assert!((crate::augment::pg_mean(0.0 + 1.0, 0.0) - 0.25).abs() < 1e-14);
        // y = 2, E[r] = 1, E[F²] = 4: pg_mean(3, 2) = (3/4) tanh 1
        let want = 0.75 * 1.0f64.tanh();
        assert!((crate::augment::pg_mean(3.0, 2.0) - want).abs() < 1e-14);
        assert!((want - 0.571_195_616_966_823_7).abs() < 1e-10);
        // linearity of the PG mean in its shape at fixed tilt
        let c = 1.7;
        let unit = pg_mean_unit(c);
        assert!((crate::augment::pg_mean(3.0, c) - 3.0 * unit).abs() < 1e-14);
    }

    #[test]
    fn aug_pg_sums_respect_trials() {
        let (data, _, mut state, _, stats) = small_setup();
        let fm = state.f_moments();
        update_aug_pg(&mut state, &stats, &fm);
        let (m, n, t) = (1, 2, 3);
        let c = fm.second[[m, n, t]].max(0.0).sqrt();
        let g = pg_mean_unit(c);
        let mut want_a = 0.0;
        let mut want_b = 0.0;
        for trial in 0..data.n_trials(m) {
            let y = data.counts(m)[[trial, n, t]] as f64;
            want_a += g * (y + state.disp_mean[n]);
            want_b += 0.5 * (y - state.disp_mean[n]);
        }
        assert!((state.aug.omega_sum[[m, n, t]] - want_a).abs() < 1e-12);
        assert!((state.aug.pseudo_sum[[m, n, t]] - want_b).abs() < 1e-12);
    }

    #[test]
    fn masked_neuron_recovers_weight_prior() {
        let (mut data, config, _, grams, _) = small_setup();
        // mask neuron 1 out of every trial
        let mask: Vec<ndarray::Array2<bool>> = (0..data.n_conditions())
            .map(|m| {
                ndarray::Array2::from_shape_fn((data.n_trials(m), data.n_neurons()), |(_, n)| {
                    n != 1
                })
            })
            .collect();
        data.set_mask(Some(mask)).unwrap();
        let mut state = initialize_state(&data, &config).unwrap();
        let stats = SuffStats::new(&data);
        let fm = state.f_moments();
        update_aug_gamma(&mut state, &stats);
        update_aug_pig(&mut state);
        update_aug_pg(&mut state, &stats, &fm);
        update_q_w(&mut state, &grams).unwrap();

        let m_count = state.n_conditions();
        let kw = grams.cond.jittered();
        let w = &state.weights[1];
        for v in w.mean.iter() {
            assert!(v.abs() < 1e-10, "masked neuron mean should be prior zero");
        }
        for d in 0..state.n_latents() {
            let tau = state.ard_mean(d);
            for i in 0..m_count {
                for j in 0..m_count {
                    let got = w.cov[[d * m_count + i, d * m_count + j]];
                    let want = kw[[i, j]] / tau;
                    assert!(
                        (got - want).abs() < 1e-8,
                        "prior covariance not recovered: {got} vs {want}"
                    );
                }
            }
        }
    }

    /// Hand-checkable scalar instance: M = N = T = D = 1, one trial.
    fn scalar_state(
        y: u32,
    ) -> (
        SpikeTensor,
        VariationalState,
        FitGrams,
        SuffStats,
        ModelConfig,
    ) {
        let counts = vec![NdArray3::from_elem((1, 1, 1), y)];
        let coords = unit_grid(1);
        let data = SpikeTensor::new(counts, 1.0, coords).unwrap();
        let config = ModelConfig {
            latents: 1,
            condition_lengthscales: vec![0.4],
            seed: 2,
            ..ModelConfig::default()
        };
        let state = initialize_state(&data, &config).unwrap();
        let grams = build_grams(
            &data.condition_coords,
            1,
            &state.time_lengthscales,
            &state.condition_lengthscales,
            config.jitter,
        )
        .unwrap();
        let stats = SuffStats::new(&data);
        (data, state, grams, stats, config)
    }

    #[test]
    fn scalar_weight_update_matches_hand_algebra() {
        let (_, mut state, grams, stats, _) = scalar_state(3);
        // place non-trivial moments
        state.latents[0].mean[0] = 0.8;
        state.latents[0].cov[[0, 0]] = 0.3;
        state.bias_mean[0] = 0.2;
        let fm = state.f_moments();
        update_aug_pg(&mut state, &stats, &fm);
        let a = state.aug.omega_sum[[0, 0, 0]];
        let b = state.aug.pseudo_sum[[0, 0, 0]];

        update_q_w(&mut state, &grams).unwrap();
        let kw = grams.cond.jittered()[[0, 0]];
        let tau = state.ard_mean(0);
        let x2 = 0.8 * 0.8 + 0.3;
        let v_want = 1.0 / (tau / kw + x2 * a);
        let m_want = v_want * 0.8 * (b - a * 0.2);
        assert!((state.weights[0].cov[[0, 0]] - v_want).abs() < 1e-12);
        assert!((state.weights[0].mean[0] - m_want).abs() < 1e-12);
    }

    #[test]
    fn scalar_latent_update_matches_hand_algebra() {
        let (_, mut state, grams, stats, _) = scalar_state(2);
        state.weights[0].mean[0] = 0.5;
        state.weights[0].cov[[0, 0]] = 0.1;
        state.bias_mean[0] = -0.3;
        let fm = state.f_moments();
        update_aug_pg(&mut state, &stats, &fm);
        let a = state.aug.omega_sum[[0, 0, 0]];
        let b = state.aug.pseudo_sum[[0, 0, 0]];

        update_q_x(&mut state, &grams).unwrap();
        let kx = grams.time[0].jittered()[[0, 0]];
        let w2 = 0.5 * 0.5 + 0.1;
        let cov_want = 1.0 / (1.0 / kx + w2 * a);
        let mean_want = cov_want * 0.5 * (b - a * (-0.3));
        assert!((state.latents[0].cov[[0, 0]] - cov_want).abs() < 1e-12);
        assert!((state.latents[0].mean[0] - mean_want).abs() < 1e-12);
    }

    #[test]
    fn scalar_bias_update_matches_hand_algebra() {
        let (_, mut state, _, stats, _) = scalar_state(1);
        state.weights[0].mean[0] = 0.4;
        state.weights[0].cov[[0, 0]] = 0.0;
        state.latents[0].mean[0] = 0.6;
        state.latents[0].cov[[0, 0]] = 0.0;
        let fm = state.f_moments();
        update_aug_pg(&mut state, &stats, &fm);
        let a = state.aug.omega_sum[[0, 0, 0]];
        let b = state.aug.pseudo_sum[[0, 0, 0]];
        let tau_beta = state.bias_prec_mean();

        update_q_beta(&mut state);
        let var_want = 1.0 / (tau_beta + a);
        let mean_want = var_want * (b - a * 0.4 * 0.6);
        assert!((state.bias_var[0] - var_want).abs() < 1e-12);
        assert!((state.bias_mean[0] - mean_want).abs() < 1e-12);
    }

    #[test]
    fn latent_prior_recovered_when_weights_vanish() {
        let (_, _, mut state, grams, stats) = small_setup();
        for w in state.weights.iter_mut() {
            w.mean.fill(0.0);
            w.cov.fill(0.0);
        }
        let fm = state.f_moments();
        update_aug_pg(&mut state, &stats, &fm);
        update_q_x(&mut state, &grams).unwrap();
        for d in 0..state.n_latents() {
            let prior = grams.time[d].jittered();
            for v in state.latents[d].mean.iter() {
                assert!(v.abs() < 1e-12);
            }
            let diff = (&state.latents[d].cov - &prior)
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-8, "latent prior not recovered, max diff {diff}");
        }
    }

    #[test]
    fn latent_posterior_variance_never_exceeds_prior() {
        let (_, _, mut state, grams, stats) = small_setup();
        let fm = state.f_moments();
        update_aug_pg(&mut state, &stats, &fm);
        update_q_w(&mut state, &grams).unwrap();
        update_q_x(&mut state, &grams).unwrap();
        for d in 0..state.n_latents() {
            let prior = grams.time[d].jittered();
            for t in 0..state.n_bins() {
                assert!(state.latents[d].cov[[t, t]] <= prior[[t, t]] + 1e-10);
            }
        }
    }

    #[test]
    fn bias_variance_decreases_with_data() {
        let (_, _, mut state, grams, stats) = small_setup();
        let fm = state.f_moments();
        update_aug_pg(&mut state, &stats, &fm);
        update_q_w(&mut state, &grams).unwrap();
        update_q_beta(&mut state);
        let with_data = state.bias_var[0];
        // no data: zero the augmented sums
        state.aug.omega_sum.fill(0.0);
        state.aug.pseudo_sum.fill(0.0);
        update_q_beta(&mut state);
        let no_data = state.bias_var[0];
        assert!((no_data - 1.0 / state.bias_prec_mean()).abs() < 1e-12);
        assert!(state.bias_mean[0].abs() < 1e-12);
        assert!(with_data < no_data);
    }

    #[test]
    fn tau_beta_update_plugin_values() {
        let (_, config, mut state, _, _) = small_setup();
        state.bias_mean.fill(0.0);
        state.bias_var.fill(0.0);
        state.bias_var[0] = 2.0;
        update_q_tau_beta(&mut state, &config);
        let n = state.n_neurons() as f64;
        assert!((state.bias_prec.shape - (1e-5 + n / 2.0)).abs() < 1e-12);
        assert!((state.bias_prec.rate - (1e-5 + 1.0)).abs() < 1e-12);
        // degenerate biases at zero pin the precision high
        state.bias_var.fill(0.0);
        update_q_tau_beta(&mut state, &config);
        assert!((state.bias_prec.rate - 1e-5).abs() < 1e-15);
        assert!(state.bias_prec.mean() > 1e4);
    }

    #[test]
    fn ard_identity_covariance_hand_value() {
        let (_, config, mut state, mut grams, _) = small_setup();
        let m_count = state.n_conditions();
        // force K_W = I and the weight posterior to mean 0, covariance I
        grams.cond = crate::kernel::factorize(ndarray::Array2::eye(m_count), 1e-8).unwrap();
        for w in state.weights.iter_mut() {
            w.mean.fill(0.0);
            w.cov = ndarray::Array2::eye(w.cov.nrows());
        }
        update_q_ard(&mut state, &grams, &config);
        let mn = (state.n_conditions() * state.n_neurons()) as f64;
        for d in 0..state.n_latents() {
            assert!((state.ard[d].shape - (1e-5 + mn / 2.0)).abs() < 1e-12);
            assert!((state.ard[d].rate - (1e-5 + mn / 2.0)).abs() < 1e-9);
            assert!((state.ard[d].mean() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn ard_prunes_empty_dimension() {
        let (_, config, mut state, grams, _) = small_setup();
        for w in state.weights.iter_mut() {
            w.mean.fill(0.0);
            w.cov.fill(0.0);
        }
        update_q_ard(&mut state, &grams, &config);
        for d in 0..state.n_latents() {
            // rate collapses to the prior rate, precision explodes
            assert!((state.ard[d].rate - config.ard_rate).abs() < 1e-15);
            assert!(state.ard[d].mean() > 1e5);
        }
    }

    #[test]
    fn dispersion_curvature_matches_finite_difference() {
        for &(y, r, c) in &[
            (0.0f64, 0.5f64, 0.3f64),
            (2.0, 1.5, 1.0),
            (5.0, 3.0, 2.5),
            (1.0, 0.2, 0.01),
        ] {
            let h = 1e-3 * r.max(0.5);
            let fd = (dispersion_h(r + h, y, r, c) - 2.0 * dispersion_h(r, y, r, c)
                + dispersion_h(r - h, y, r, c))
                / (h * h);
            let analytic = -dispersion_curvature(y, r, c);
            let rel = ((fd - analytic) / analytic).abs();
            assert!(
                rel < 1e-5,
                "y={y} r={r} c={c}: fd={fd}, analytic={analytic}, rel={rel}"
            );
        }
    }

    #[test]
    fn monitor_zero_counts_unit_dispersion_is_ln2() {
        // r = 1, F = 0 on all-zero counts: per-bin log NB(0; 1, 1/2) = −ln 2
        let counts = vec![NdArray3::<u32>::zeros((2, 2, 3))];
        let data = SpikeTensor::new(counts, 1.0, unit_grid(1)).unwrap();
        let config = ModelConfig {
            latents: 1,
            condition_lengthscales: vec![0.4],
            ..ModelConfig::default()
        };
        let mut state = initialize_state(&data, &config).unwrap();
        for g in state.latents.iter_mut().chain(state.weights.iter_mut()) {
            g.mean.fill(0.0);
            g.cov.fill(0.0);
        }
        state.bias_mean.fill(0.0);
        state.bias_var.fill(0.0);
        state.disp_mean.fill(1.0);
        let v = monitor(&state, &data).unwrap();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-12, "monitor {v}");
    }

    #[test]
    fn monitor_is_permutation_invariant_over_neurons() {
        let (data, config, _, _, _) = small_setup();
        let state = initialize_state(&data, &config).unwrap();
        let v = monitor(&state, &data).unwrap();

        // permute neurons in both data and state
        let perm = [2usize, 0, 3, 1];
        let counts: Vec<NdArray3<u32>> = (0..data.n_conditions())
            .map(|m| {
                let block = data.counts(m);
                NdArray3::from_shape_fn(block.dim(), |(trial, n, t)| block[[trial, perm[n], t]])
            })
            .collect();
        let pdata = SpikeTensor::new(counts, 1.0, data.condition_coords.clone()).unwrap();
        let mut pstate = state.clone();
        for (n, &src) in perm.iter().enumerate() {
            pstate.weights[n] = state.weights[src].clone();
            pstate.bias_mean[n] = state.bias_mean[src];
            pstate.bias_var[n] = state.bias_var[src];
            pstate.disp_mean[n] = state.disp_mean[src];
            pstate.disp_second_moment[n] = state.disp_second_moment[src];
            pstate.disp_log_mean[n] = state.disp_log_mean[src];
        }
        let pv = monitor(&pstate, &pdata).unwrap();
        assert!((v - pv).abs() < 1e-12);
    }

    #[test]
    fn per_neuron_updates_are_permutation_equivariant() {
        let (data, config, _, grams, _) = small_setup();
        let state0 = initialize_state(&data, &config).unwrap();

        let perm = [3usize, 1, 0, 2];
        let counts: Vec<NdArray3<u32>> = (0..data.n_conditions())
            .map(|m| {
                let block = data.counts(m);
                NdArray3::from_shape_fn(block.dim(), |(trial, n, t)| block[[trial, perm[n], t]])
            })
            .collect();
        let pdata = SpikeTensor::new(counts, 1.0, data.condition_coords.clone()).unwrap();
        let mut pstate0 = state0.clone();
        for (n, &src) in perm.iter().enumerate() {
            pstate0.weights[n] = state0.weights[src].clone();
            pstate0.bias_mean[n] = state0.bias_mean[src];
            pstate0.bias_var[n] = state0.bias_var[src];
            pstate0.disp_mean[n] = state0.disp_mean[src];
            pstate0.disp_second_moment[n] = state0.disp_second_moment[src];
            pstate0.disp_log_mean[n] = state0.disp_log_mean[src];
        }

        let sweep = |mut s: VariationalState, d: &SpikeTensor| -> VariationalState {
            let st = SuffStats::new(d);
            let fm = s.f_moments();
            update_aug_gamma(&mut s, &st);
            update_aug_pig(&mut s);
            update_aug_pg(&mut s, &st, &fm);
            update_q_w(&mut s, &grams).unwrap();
            update_q_beta(&mut s);
            let fm2 = s.f_moments();
            update_q_r(&mut s, &st, &fm2).unwrap();
            s
        };
        let s1 = sweep(state0, &data);
        let s2 = sweep(pstate0, &pdata);
        for (n, &src) in perm.iter().enumerate() {
            assert_eq!(s2.weights[n].mean, s1.weights[src].mean);
            assert_eq!(s2.weights[n].cov, s1.weights[src].cov);
            assert_eq!(s2.bias_mean[n], s1.bias_mean[src]);
            assert_eq!(s2.disp_mean[n], s1.disp_mean[src]);
        }
    }

    #[test]
    fn mstep_gradient_matches_finite_difference_small() {
        let (data, _, mut state, grams, stats) = small_setup();
        let cfg = ModelConfig {
            latents: 2,
            condition_lengthscales: vec![0.4],
            ..ModelConfig::default()
        };
        // a sweep so the scatter matrices are off the prior
        let fm = state.f_moments();
        update_aug_gamma(&mut state, &stats);
        update_aug_pig(&mut state);
        update_aug_pg(&mut state, &stats, &fm);
        update_q_w(&mut state, &grams).unwrap();
        update_q_x(&mut state, &grams).unwrap();
        update_q_beta(&mut state);
        update_q_ard(&mut state, &grams, &cfg);

        let problem = MstepProblem::from_state(&state, &grams, &data.condition_coords);
        let theta_log: Vec<f64> = state.time_lengthscales.iter().map(|v| v.ln()).collect();
        let ell_log: Vec<f64> = state
            .condition_lengthscales
            .iter()
            .map(|v| v.ln())
            .collect();
        let (g_theta, g_ell) = problem.gradient(&theta_log, &ell_log).unwrap();
        let h = 1e-6;
        for d in 0..theta_log.len() {
            let mut up = theta_log.clone();
            let mut dn = theta_log.clone();
            up[d] += h;
            dn[d] -= h;
            let fd = (problem.objective(&up, &ell_log).unwrap()
                - problem.objective(&dn, &ell_log).unwrap())
                / (2.0 * h);
            let rel = ((fd - g_theta[d]) / fd.abs().max(1e-8)).abs();
            assert!(rel < 1e-4, "θ[{d}]: fd={fd}, analytic={}", g_theta[d]);
        }
        for k in 0..ell_log.len() {
            let mut up = ell_log.clone();
            let mut dn = ell_log.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (problem.objective(&theta_log, &up).unwrap()
                - problem.objective(&theta_log, &dn).unwrap())
                / (2.0 * h);
            let rel = ((fd - g_ell[k]) / fd.abs().max(1e-8)).abs();
            assert!(rel < 1e-4, "ℓ[{k}]: fd={fd}, analytic={}", g_ell[k]);
        }
    }

    #[test]
    fn fit_smoke_improves_monitor_and_is_deterministic() {
        let data = generate_synthetic(&gen_spec(9)).unwrap().0;
        let config = ModelConfig {
            latents: 2,
            condition_lengthscales: vec![0.4],
            max_iters: 8,
            seed: 4,
            ..ModelConfig::default()
        };
        let (state, report) = fit(&data, &config).unwrap();
        assert_eq!(report.iterations_run, 8);
        assert!(report.monitor.iter().all(|v| v.is_finite()));
        assert!(
            report.monitor.last().unwrap() > report.monitor.first().unwrap(),
            "monitor did not improve: {:?}",
            report.monitor
        );
        assert!(state.disp_mean.iter().all(|&r| r > 0.0));

        let (_, report2) = fit(&data, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&report2).unwrap()
        );
    }

    #[test]
    fn posterior_covariances_stay_psd_through_fit() {
        let data = generate_synthetic(&gen_spec(5)).unwrap().0;
        let config = ModelConfig {
            latents: 2,
            condition_lengthscales: vec![0.4],
            max_iters: 5,
            ..ModelConfig::default()
        };
        let (state, _) = fit(&data, &config).unwrap();
        for g in state.latents.iter().chain(state.weights.iter()) {
            assert!(
                linalg::is_psd_within(g.cov.view(), 1e-8),
                "posterior covariance lost positive semidefiniteness"
            );
            let sym_err = (&g.cov - &g.cov.t())
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(sym_err < 1e-9);
        }
    }
}
