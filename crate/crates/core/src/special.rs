//! Scalar special functions and numerically stable helpers shared by the
//! augmentation moments and the likelihood code.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Euler–Mascheroni constant γ.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// ψ′(x), the trigamma function.
///
/// Recurrence ψ′(x) = ψ′(x+1) + 1/x² up to x ≥ 6, then the asymptotic
/// Bernoulli series. Accurate to ~1e-13 relative on x > 0.
pub fn trigamma(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        if x == x.floor() {
            return f64::INFINITY;
        }
        // reflection: ψ′(1-x) + ψ′(x) = π²/sin²(πx)
        let s = (std::f64::consts::PI * x).sin();
        return -trigamma(1.0 - x) + std::f64::consts::PI.powi(2) / (s * s);
    }
    let mut acc = 0.0;
    let mut z = x;
    while z < 10.0 {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // 1/z + 1/2z² + Σ B_{2k} / z^{2k+1}
    let series = inv
        + 0.5 * inv2
        + inv2 * inv * (1.0 / 6.0
            + inv2 * (-1.0 / 30.0
                + inv2 * (1.0 / 42.0
                    + inv2 * (-1.0 / 30.0
                        + inv2 * (5.0 / 66.0 + inv2 * (-691.0 / 2730.0))))));
    acc + series
}

/// log(1 + e^x) without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function 1/(1 + e^{-x}).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log cosh(x) without overflow for large |x|.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a - std::f64::consts::LN_2 + (-2.0 * a).exp().ln_1p()
}

/// sinh(c) − c, evaluated without cancellation for small c.
pub fn sinh_minus(c: f64) -> f64 {
    if c.abs() < 0.3 {
        let c2 = c * c;
        // c³/6 · (1 + c²/20 + c⁴/840 + c⁶/60480 + c⁸/6652800)
        c * c2 / 6.0
            * (1.0
                + c2 * (1.0 / 20.0
                    + c2 * (1.0 / 840.0 + c2 * (1.0 / 60_480.0 + c2 / 6_652_800.0))))
    } else {
        c.sinh() - c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigamma_known_values() {
        // ψ′(1) = π²/6, ψ′(1/2) = π²/2
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-11);
        // recurrence ψ′(x+1) = ψ′(x) − 1/x²
        for &x in &[0.3, 1.7, 4.2, 11.0] {
            let lhs = trigamma(x + 1.0);
            let rhs = trigamma(x) - 1.0 / (x * x);
            assert!((lhs - rhs).abs() < 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn trigamma_matches_digamma_finite_difference() {
        for &x in &[0.2f64, 0.9, 2.5, 7.3, 40.0] {
            let h = 1e-5 * x.max(1.0);
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            let tg = trigamma(x);
            assert!(
                ((fd - tg) / tg).abs() < 1e-7,
                "x={x}: fd={fd}, trigamma={tg}"
            );
        }
    }

    #[test]
    fn softplus_and_sigmoid_extremes() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(800.0) == 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn ln_cosh_stable() {
        assert!((ln_cosh(1.0) - 1.0f64.cosh().ln()).abs() < 1e-14);
        assert!((ln_cosh(-3.0) - 3.0f64.cosh().ln()).abs() < 1e-13);
        // overflow regime: cosh(1000) overflows, ln_cosh must not
        assert!((ln_cosh(1000.0) - (1000.0 - std::f64::consts::LN_2)).abs() < 1e-10);
    }

    #[test]
    fn sinh_minus_agrees_across_branches() {
        for &c in &[1e-8, 1e-4, 0.01, 0.29, 0.3, 0.31, 1.0, 5.0] {
            let stable = sinh_minus(c);
            // reference via higher-precision-ish series for small c, direct otherwise
            let direct = c.sinh() - c;
            if c >= 0.05 {
                assert!(
                    ((stable - direct) / direct).abs() < 1e-9,
                    "c={c}: {stable} vs {direct}"
                );
            } else {
                let c2 = c * c;
                let series = c * c2 / 6.0 * (1.0 + c2 / 20.0 + c2 * c2 / 840.0);
                assert!(((stable - series) / series).abs() < 1e-12);
            }
        }
    }
}
