//! Independent numerical oracles for the closed-form and sampled quantities.

use lrla::rng::{stream, Purpose};
use lrla::varbayes::{gaussian_kl, kl_divergence, HorseshoePrior, VariationalPosterior};
use std::f64::consts::PI;

/// `log C⁺(x; 0, γ)` written directly from the density.
fn half_cauchy_log(x: f64, gamma: f64) -> f64 {
    let r = x / gamma;
    let log1p_r2 = if r > 1e150 { 2.0 * r.ln() } else { (r * r).ln_1p() };
    (2.0 / PI).ln() - gamma.ln() - log1p_r2
}

/// `log LogNormal(x; m, λ²)`.
fn log_normal_log(x: f64, m: f64, lam: f64) -> f64 {
    let z = (x.ln() - m) / lam;
    -x.ln() - lam.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * z * z
}

/// `KL(LogNormal(m, λ²) ‖ C⁺(0, γ))` by Simpson's rule over the standard
/// normal variable behind `x = exp(m + λη)`.
fn log_normal_half_cauchy_kl(m: f64, lam: f64, gamma: f64) -> f64 {
    let (lo, hi, n) = (-12.0, 12.0, 24_000);
    let h = (hi - lo) / n as f64;
    let mut acc = 0.0;
    for i in 0..=n {
        let eta = lo + h * i as f64;
        let x = (m + lam * eta).exp();
        let f = (-0.5 * eta * eta).exp() / (2.0 * PI).sqrt() * (log_normal_log(x, m, lam) - half_cauchy_log(x, gamma));
        let c = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += c * f;
    }
    acc * h / 3.0
}

#[test]
fn sampled_scale_kl_matches_quadrature() {
    let prior = HorseshoePrior::default();
    let cases = [
        (0.0, 0.0, -11.5, -1.0),
        (-2.0, -2.0, -9.0, 0.5),
        (1.5, 0.3, -14.0, -3.0),
        (-6.0, -4.0, -5.0, 0.0),
    ];
    for (i, &(m, ls, ms, lss)) in cases.iter().enumerate() {
        let q = VariationalPosterior::new(vec![0], vec![0.3, -0.5, m, ls, ms, lss]).unwrap();
        let est = kl_divergence(&q, &prior, &mut stream(31, Purpose::KlSample, i as u64), 100_000).unwrap();
        let oracle = log_normal_half_cauchy_kl(m, ls.exp(), 1.0) + log_normal_half_cauchy_kl(ms, lss.exp(), prior.tau0);
        assert!(
            (est.scale_factors - oracle).abs() < 3.0 * est.scale_factors_se,
            "case {i}: sampled {} ± {}, quadrature {oracle}",
            est.scale_factors,
            est.scale_factors_se
        );
    }
}

#[test]
fn gaussian_kl_matches_closed_form() {
    let phi = vec![0.5, -1.0, 0.2, -0.7, 0.0, 0.0, 0.0, 0.0];
    let q = VariationalPosterior::new(vec![0, 0], phi).unwrap();
    // KL(N(μ, σ²) ‖ N(0, 1)) = ½(μ² + σ² − 1) − ln σ
    let one = |mu: f64, sd: f64| 0.5 * (mu * mu + sd * sd - 1.0) - sd.ln();
    let expected = one(0.5, 0.2f64.exp()) + one(-1.0, (-0.7f64).exp());
    assert!((gaussian_kl(&q) - expected).abs() < 1e-14);
}

#[test]
fn quadrature_oracle_is_calibrated() {
    // a log-normal concentrated at x = 1 gives KL → −H(q) − log p(1), p(1) = 1/π
    let lam: f64 = 1e-3;
    let entropy = 0.5 * (2.0 * PI * std::f64::consts::E).ln() + lam.ln();
    let expected = -entropy - (2.0 / PI).ln() + 2f64.ln();
    let got = log_normal_half_cauchy_kl(0.0, lam, 1.0);
    assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
}
