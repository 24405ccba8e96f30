//! Standard-normal distribution function and its logarithm.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Below this argument `log_phi` switches to the asymptotic tail expansion.
const TAIL_THRESHOLD: f64 = -10.0;

/// Standard normal CDF, `Φ(x) = erfc(-x/√2)/2`.
pub fn phi(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `log Φ(x)`, accurate in both tails.
pub fn log_phi(x: f64) -> f64 {
    if x < TAIL_THRESHOLD {
        log_phi_tail(x)
    } else if x > 0.0 {
        // Φ(x) = 1 - Φ(-x); keep the small complement exact.
        (-0.5 * erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else {
        phi(x).ln()
    }
}

/// Mills-ratio expansion: Φ(x) = φ(x)/(-x) · Σ_k (-1)^k (2k-1)!! / x^{2k}.
fn log_phi_tail(x: f64) -> f64 {
    let inv_x2 = 1.0 / (x * x);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=24 {
        term *= -((2 * k - 1) as f64) * inv_x2;
        sum += term;
    }
    -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln() + sum.ln()
}

/// Inverse Mills ratio `φ(x)/Φ(x)`, stable for large negative `x`.
pub fn mills_ratio(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * (2.0 * PI).ln() - log_phi(x)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values evaluated with 50-digit arithmetic.
    const LOG_PHI_REFERENCE: &[(f64, f64)] = &[
        (-37.0, -689.0305855768905936),
        (-30.0, -454.3212439563431971),
        (-20.0, -203.9171553710972639),
        (-15.0, -116.1313848457116952),
        (-10.5, -58.40418706107324342),
        (-10.0, -53.23128515051247058),
        (-9.9, -52.22642830040404507),
        (-5.0, -15.06499839398872574),
        (-1.0, -1.841021645009263506),
        (0.0, -0.6931471805599453094),
        (1.0, -0.1727537790234498895),
        (3.0, -0.001350809964748193799),
        (8.0, -6.220960574271786059e-16),
    ];

    #[test]
    fn phi_at_zero_is_half() {
        assert_eq!(phi(0.0), 0.5);
    }

    #[test]
    fn phi_symmetry() {
        let mut x = -8.0;
        while x <= 8.0 {
            assert!((phi(-x) - (1.0 - phi(x))).abs() < 1e-15, "x = {x}");
            x += 0.01;
        }
    }

    #[test]
    fn phi_one() {
        assert!((phi(1.0) - 0.8413447460685429).abs() < 1e-15);
    }

    #[test]
    fn log_phi_relative_accuracy() {
        for &(x, want) in LOG_PHI_REFERENCE {
            let got = log_phi(x);
            let rel = ((got - want) / want).abs();
            assert!(rel <= 1e-10, "x = {x}: got {got}, want {want}, rel {rel:e}");
        }
    }

    #[test]
    fn log_phi_is_continuous_at_threshold() {
        let a = log_phi(TAIL_THRESHOLD - 1e-12);
        let b = log_phi(TAIL_THRESHOLD + 1e-12);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn log_phi_monotone() {
        let mut prev = f64::NEG_INFINITY;
        let mut x = -37.0;
        while x < 8.0 {
            let lp = log_phi(x);
            assert!(lp > prev, "x = {x}");
            prev = lp;
            x += 0.05;
        }
    }

    #[test]
    fn mills_ratio_tail() {
        // φ(x)/Φ(x) → -x as x → -∞
        assert!((mills_ratio(-30.0) - 30.0).abs() < 0.05);
        assert!((mills_ratio(0.0) - pdf(0.0) / 0.5).abs() < 1e-15);
    }
}
