//! Moments of the augmentation distributions: Pólya-Gamma (PG),
//! Pólya-inverse-Gamma (P-IG), Power-Truncated-Normal (PTN), and the
//! moment-matching map from PG to Gamma.
//!
//! Only moments and the Laplace transform are ever needed by the inference
//! engine; densities are never evaluated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{digamma, ln_cosh, sinh_minus};

/// Tilt below which PG mean switches to its c→0 limit b/4.
const PG_MEAN_TILT_FLOOR: f64 = 1e-6;
/// Tilt below which PG variance switches to its c→0 limit b/24.
const PG_VAR_TILT_FLOOR: f64 = 1e-4;
/// Tilt floor for the PG→Gamma matching formulas (0/0 at c = 0).
const PG_MATCH_TILT_FLOOR: f64 = 1e-4;
/// Tilt below which the P-IG mean uses its series limit.
const PIG_TILT_FLOOR: f64 = 1e-6;
/// ψ″(1) = −2ζ(3).
const PSI2_AT_ONE: f64 = -2.404_113_806_319_188_5;

/// Parameters of PG(b, c): shape `b` > 0 and tilt `c` ≥ 0. Negative tilts are
/// folded by symmetry.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PgParams {
    pub shape: f64,
    pub tilt: f64,
}

impl PgParams {
    pub fn new(shape: f64, tilt: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0) {
            return Err(Error::invalid(format!("PG shape must be > 0, got {shape}")));
        }
        if !tilt.is_finite() {
            return Err(Error::invalid("PG tilt must be finite"));
        }
        Ok(PgParams {
            shape,
            tilt: tilt.abs(),
        })
    }

    pub fn mean(&self) -> f64 {
        self.shape * pg_mean_unit(self.tilt)
    }

    pub fn variance(&self) -> f64 {
        pg_variance(self.shape, self.tilt)
    }

    pub fn moment_match_gamma(&self) -> GammaParams {
        pg_moment_match_gamma(self.shape, self.tilt)
    }
}

/// Gamma(shape α, rate β); also the family of the ARD and bias-precision
/// variational factors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::invalid(format!(
                "Gamma parameters must be positive, got shape={shape} rate={rate}"
            )));
        }
        Ok(GammaParams { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }
}

/// E[ω]/b for ω ~ PG(b, c): tanh(c/2)/(2c), with the c→0 limit 1/4.
/// The PG mean is linear in the shape, so per-trial sums only need this
/// shape-free factor.
pub fn pg_mean_unit(c: f64) -> f64 {
    let c = c.abs();
    if c < PG_MEAN_TILT_FLOOR {
        0.25
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

/// E[ω] = b tanh(c/2) / (2c).
pub fn pg_mean(b: f64, c: f64) -> f64 {
    b * pg_mean_unit(c)
}

/// V[ω] = b (sinh c − c) / (4 c³ cosh²(c/2)), with the c→0 limit b/24.
pub fn pg_variance(b: f64, c: f64) -> f64 {
    let c = c.abs();
    if c < PG_VAR_TILT_FLOOR {
        b / 24.0
    } else if c > 40.0 {
        // (sinh c − c)/(4 cosh²(c/2)) → 1/2 up to O(c e^{−c})
        b / (2.0 * c * c * c)
    } else {
        b * sinh_minus(c) / (4.0 * c * c * c * (0.5 * c).cosh().powi(2))
    }
}

/// Laplace transform E[e^{−ωt}] = cosh^{−b}(√(t/2)) of ω ~ PG(b, 0).
pub fn pg_laplace(b: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    (-b * ln_cosh((0.5 * t).sqrt())).exp()
}

/// Slope ∂α/∂b of the matched Gamma shape: c sinh²(c/2) / (sinh c − c),
/// with limit 3/2 as c→0 and asymptote c/2 for large c. Tilts below the
/// matching floor are clamped to it.
pub fn pg_match_shape_slope(c: f64) -> f64 {
    let c = c.abs().max(PG_MATCH_TILT_FLOOR);
    if c > 40.0 {
        0.5 * c
    } else {
        let s = (0.5 * c).sinh();
        c * s * s / sinh_minus(c)
    }
}

/// Rate of the Gamma matched to PG(·, c): c² sinh c / (sinh c − c), limit 6
/// as c→0 and asymptote c² for large c. Shape-independent.
pub fn pg_match_rate(c: f64) -> f64 {
    let c = c.abs().max(PG_MATCH_TILT_FLOOR);
    if c > 40.0 {
        c * c
    } else {
        c * c * c.sinh() / sinh_minus(c)
    }
}

/// Gamma distribution matching the first two moments of PG(b, c).
///
/// α = b c tanh²(c/2) cosh²(c/2) / (sinh c − c), β = 2 c² tanh(c/2) cosh²(c/2)
/// / (sinh c − c); by construction α/β and α/β² equal the PG mean and
/// variance exactly.
pub fn pg_moment_match_gamma(b: f64, c: f64) -> GammaParams {
    GammaParams {
        shape: b * pg_match_shape_slope(c),
        rate: pg_match_rate(c),
    }
}

/// Mean of the Pólya-inverse-Gamma distribution with tilting parameter `t`:
/// (ψ(t+1) − ψ(1)) / (2t), with the t→0 limit π²/12 (plus its linear
/// correction, so the branches agree at the switch-over).
pub fn pig_mean(tilt: f64) -> f64 {
    debug_assert!(tilt >= 0.0);
    if tilt < PIG_TILT_FLOOR {
        std::f64::consts::PI.powi(2) / 12.0 + 0.25 * PSI2_AT_ONE * tilt
    } else {
        (digamma(tilt + 1.0) - digamma(1.0)) / (2.0 * tilt)
    }
}

/// Power-Truncated-Normal parameters: density ∝ r^{p−1} exp(b·r − a·r²) on
/// r > 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PtnParams {
    /// Power p > 0.
    pub power: f64,
    /// Quadratic coefficient a > 0.
    pub quad: f64,
    /// Linear coefficient b (any sign).
    pub linear: f64,
}

impl PtnParams {
    pub fn new(power: f64, quad: f64, linear: f64) -> Result<Self> {
        if !(power.is_finite() && power > 0.0) {
            return Err(Error::invalid(format!("PTN power must be > 0, got {power}")));
        }
        if !(quad.is_finite() && quad > 0.0) {
            return Err(Error::invalid(format!(
                "PTN quadratic coefficient must be > 0, got {quad}"
            )));
        }
        if !linear.is_finite() {
            return Err(Error::invalid("PTN linear coefficient must be finite"));
        }
        Ok(PtnParams {
            power,
            quad,
            linear,
        })
    }

    /// log unnormalized density. The power term is exactly zero at p = 1 so
    /// the origin evaluates cleanly instead of 0·ln 0.
    fn log_density(&self, r: f64) -> f64 {
        let power_term = if self.power == 1.0 {
            0.0
        } else {
            (self.power - 1.0) * r.ln()
        };
        power_term + self.linear * r - self.quad * r * r
    }

    /// Interior stationary point of the log density, if any.
    fn interior_mode(&self) -> Option<f64> {
        let (p, a, b) = (self.power, self.quad, self.linear);
        let disc = b * b + 8.0 * a * (p - 1.0);
        if p > 1.0 {
            Some((b + disc.sqrt()) / (4.0 * a))
        } else if (p - 1.0).abs() == 0.0 {
            if b > 0.0 {
                Some(b / (2.0 * a))
            } else {
                None
            }
        } else if disc >= 0.0 && b > 0.0 {
            // p < 1: the larger root is a local maximum beyond the r→0 spike
            Some((b + disc.sqrt()) / (4.0 * a))
        } else {
            None
        }
    }
}

/// First moment, second moment, and log-moment of a PTN distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtnMoments {
    pub mean: f64,
    pub second_moment: f64,
    pub log_mean: f64,
}

/// Moments of a PTN distribution by deterministic adaptive quadrature.
///
/// The mode is located analytically, a ±12-standard-deviation window is laid
/// out from the Laplace curvature estimate, then extended until the density
/// has fallen by e^{−40} relative to the mode so heavy linear tails are never
/// truncated. Powers below 1 integrate the r→0 spike exactly under the
/// substitution u = r^p.
pub fn ptn_moments(params: &PtnParams) -> Result<PtnMoments> {
    let (p, a, b) = (params.power, params.quad, params.linear);
    let interior = params.interior_mode();
    let mode = interior.unwrap_or(0.0);
    let curv = if mode > 0.0 {
        (p - 1.0) / (mode * mode) + 2.0 * a
    } else {
        2.0 * a
    };
    let sigma = 1.0 / curv.sqrt();

    // reference level keeping exp() in range
    let h_ref = if mode > 0.0 {
        params.log_density(mode)
    } else {
        // p ≤ 1 with mode at the origin: scale by the exponential factor's peak
        let peak = (b / (2.0 * a)).clamp(0.0, f64::INFINITY);
        b * peak - a * peak * peak
    };

    let mut hi = mode + 12.0 * sigma;
    for _ in 0..10_000 {
        if params.log_density(hi) - h_ref <= -40.0 {
            break;
        }
        hi += 6.0 * sigma;
    }
    let mut lo = (mode - 12.0 * sigma).max(0.0);
    while lo > 0.0 && params.log_density(lo) - h_ref > -40.0 {
        lo = (lo - 6.0 * sigma).max(0.0);
    }

    let weight = |r: f64| (params.log_density(r) - h_ref).exp();
    let tol = 1e-11 * (hi - lo).max(1.0);

    let mut z = 0.0; // normalizer
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    let mut ml = 0.0;

    if p < 1.0 && lo == 0.0 {
        // near the origin integrate under u = r^p: r^{p−1} dr = du / p
        let delta = (sigma.min(hi) * 0.5).min(if mode > 0.0 { 0.5 * mode } else { f64::INFINITY });
        let delta = delta.min(hi);
        let u_hi = delta.powf(p);
        let g = |u: f64| {
            let r = u.powf(1.0 / p);
            ((b * r - a * r * r) - h_ref).exp() / p
        };
        let knots = panel_knots(0.0, u_hi, u_hi, &[]);
        z += adaptive_simpson(&g, &knots, tol);
        m1 += adaptive_simpson(&|u: f64| g(u) * u.powf(1.0 / p), &knots, tol);
        m2 += adaptive_simpson(&|u: f64| g(u) * u.powf(2.0 / p), &knots, tol);
        ml += adaptive_simpson(&|u: f64| g(u) * u.ln() / p, &knots, tol);
        lo = delta;
    }

    if hi > lo {
        // Seed the panels on every natural scale: the Laplace width around
        // the mode and a geometric ladder toward the lower endpoint, so that
        // boundary layers far narrower than the window cannot slip between
        // coarse probes (the density is unimodal apart from the p<1 spike
        // handled above).
        let mut anchors = Vec::new();
        if mode > lo && mode < hi {
            anchors.push(mode);
            for k in [1.0, 2.0, 4.0, 8.0] {
                anchors.push(mode - k * sigma);
                anchors.push(mode + k * sigma);
            }
        }
        let knots = panel_knots(lo, hi, sigma, &anchors);
        z += adaptive_simpson(&weight, &knots, tol);
        m1 += adaptive_simpson(&|r: f64| weight(r) * r, &knots, tol * hi.max(1.0));
        m2 += adaptive_simpson(&|r: f64| weight(r) * r * r, &knots, tol * (hi * hi).max(1.0));
        ml += adaptive_simpson(&|r: f64| weight(r) * r.ln(), &knots, tol);
    }

    if !(z.is_finite() && z > 0.0 && m1.is_finite() && m2.is_finite() && ml.is_finite()) {
        return Err(Error::numerical(format!(
            "PTN quadrature failed for p={p}, a={a}, b={b} (z={z})"
        )));
    }
    Ok(PtnMoments {
        mean: m1 / z,
        second_moment: m2 / z,
        log_mean: ml / z,
    })
}

/// Sorted, deduplicated panel boundaries for [lo, hi]: an even division, the
/// caller's anchor points, and a geometric ladder shrinking toward `lo` down
/// to `scale·2⁻²⁰` so sharp features at the lower end are always sampled.
fn panel_knots(lo: f64, hi: f64, scale: f64, anchors: &[f64]) -> Vec<f64> {
    let mut knots = vec![lo, hi];
    let n_even = 8;
    for i in 1..n_even {
        knots.push(lo + (hi - lo) * i as f64 / n_even as f64);
    }
    let mut step = (hi - lo).min(scale.abs());
    for _ in 0..24 {
        step *= 0.5;
        if step <= 0.0 {
            break;
        }
        knots.push(lo + step);
    }
    knots.extend(anchors.iter().copied());
    knots.retain(|x| x.is_finite() && *x >= lo && *x <= hi);
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() <= f64::EPSILON * hi.abs().max(1.0));
    knots
}

/// Adaptive Simpson quadrature over panels delimited by `knots`, with
/// Richardson extrapolation. Non-finite integrand values (integrable endpoint
/// singularities) are treated as 0.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, knots: &[f64], tol: f64) -> f64 {
    if knots.len() < 2 {
        return 0.0;
    }
    let eval = |x: f64| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    let panels = knots.len() - 1;
    let mut total = 0.0;
    for w in knots.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        if x1 <= x0 {
            continue;
        }
        let m = 0.5 * (x0 + x1);
        let (f0, fm, f1) = (eval(x0), eval(m), eval(x1));
        let whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
        total += simpson_rec(
            &eval,
            x0,
            m,
            x1,
            f0,
            fm,
            f1,
            whole,
            tol / panels as f64,
            52,
        );
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    m: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_rec(f, a, lm, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_rec(f, m, rm, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}
