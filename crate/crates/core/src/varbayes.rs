//! Factorized variational posterior under a group horseshoe prior.
//!
//! Prior: `s ~ C⁺(0, τ₀)`, `z̃_g ~ C⁺(0, 1)` per group, `θ̃_j ~ N(0, 1)`, and the
//! weight is `θ_j = θ̃_j · z̃_{g(j)} · s`.
//!
//! Posterior: `θ̃_j ~ N(μ_j, σ_j²)`, `z̃_g ~ LogNormal(m_g, λ_g²)`,
//! `s ~ LogNormal(m_s, λ_s²)`, all independent. Every scale is stored as its
//! logarithm. The Gaussian part of the KL is exact; the log-normal versus
//! half-Cauchy parts are Monte Carlo estimates.

use crate::error::{Error, Result};
use crate::net::{NetParams, NetShape};
use crate::rng::StreamRng;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Group horseshoe prior; `tau0` is the global half-Cauchy scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorseshoePrior {
    pub tau0: f64,
}

impl Default for HorseshoePrior {
    fn default() -> Self {
        Self { tau0: 1e-5 }
    }
}

/// `log C⁺(x; 0, γ)`, evaluated in log space so extreme ratios stay finite.
pub fn half_cauchy_log_pdf(log_x: f64, gamma: f64) -> f64 {
    let u = log_x - gamma.ln();
    (2.0 / PI).ln() - gamma.ln() - softplus(2.0 * u)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl HorseshoePrior {
    /// Draws `(s, z̃)` through the inverse-gamma scale-mixture representation
    /// `x² | a ~ IG(½, 1/a)`, `a ~ IG(½, 1/γ²)`, which gives `x ~ C⁺(0, γ)`.
    pub fn sample_scales<R: Rng + ?Sized>(&self, num_groups: usize, rng: &mut R) -> (f64, Vec<f64>) {
        let s = half_cauchy_via_inverse_gamma(self.tau0, rng);
        let z = (0..num_groups)
            .map(|_| half_cauchy_via_inverse_gamma(1.0, rng))
            .collect();
        (s, z)
    }
}

fn half_cauchy_via_inverse_gamma<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(0.5, 1.0).expect("valid gamma");
    let a = (1.0 / (gamma * gamma)) / g.sample(rng);
    let x2 = (1.0 / a) / g.sample(rng);
    x2.sqrt()
}

/// Flat layout of the variational parameters `φ`:
/// `[μ (P), log σ (P), m (G), log λ (G), m_s, log λ_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub groups: Vec<u32>,
    pub num_groups: usize,
    pub phi: Vec<f64>,
}

/// Initialization settings for a fresh posterior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// sd of the random θ̃ locations
    pub weight_loc_sd: f64,
    /// initial σ of every θ̃
    pub weight_scale: f64,
    /// initial λ of every log-normal scale factor
    pub factor_scale: f64,
    /// target posterior-median |θ|
    pub median_weight: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            weight_loc_sd: 0.1,
            weight_scale: 0.1,
            factor_scale: 0.1,
            median_weight: 0.1,
        }
    }
}

impl InitConfig {
    /// Weights start at the prior's typical magnitude `τ₀`.
    pub fn sparse(prior: &HorseshoePrior) -> Self {
        Self {
            median_weight: prior.tau0,
            ..Self::default()
        }
    }
}

impl VariationalPosterior {
    pub fn num_weights(&self) -> usize {
        self.groups.len()
    }

    fn p(&self) -> usize {
        self.groups.len()
    }

    pub fn weight_loc(&self) -> &[f64] {
        &self.phi[..self.p()]
    }

    pub fn weight_log_scale(&self) -> &[f64] {
        &self.phi[self.p()..2 * self.p()]
    }

    pub fn group_loc(&self) -> &[f64] {
        let p = self.p();
        &self.phi[2 * p..2 * p + self.num_groups]
    }

    pub fn group_log_scale(&self) -> &[f64] {
        let (p, g) = (self.p(), self.num_groups);
        &self.phi[2 * p + g..2 * p + 2 * g]
    }

    pub fn global_loc(&self) -> f64 {
        self.phi[2 * self.p() + 2 * self.num_groups]
    }

    pub fn global_log_scale(&self) -> f64 {
        self.phi[2 * self.p() + 2 * self.num_groups + 1]
    }

    pub fn group_loc_mut(&mut self) -> &mut [f64] {
        let p = self.p();
        let g = self.num_groups;
        &mut self.phi[2 * p..2 * p + g]
    }

    pub fn global_loc_mut(&mut self) -> &mut f64 {
        let i = 2 * self.p() + 2 * self.num_groups;
        &mut self.phi[i]
    }

    /// Sets every log-scale to `log_scale` (use a large negative value for
    /// the degenerate, zero-scale posterior).
    pub fn set_all_log_scales(&mut self, log_scale: f64) {
        let (p, g) = (self.p(), self.num_groups);
        self.phi[p..2 * p].fill(log_scale);
        self.phi[2 * p + g..2 * p + 2 * g].fill(log_scale);
        self.phi[2 * p + 2 * g + 1] = log_scale;
    }

    /// Builds a posterior with an explicit group map.
    pub fn new(groups: Vec<u32>, phi: Vec<f64>) -> Result<Self> {
        let num_groups = groups.iter().map(|&g| g as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; num_groups];
        for &g in &groups {
            seen[g as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidParameter("group ids must be contiguous".into()));
        }
        if phi.len() != 2 * groups.len() + 2 * num_groups + 2 {
            return Err(Error::ShapeMismatch(format!(
                "{} variational parameters for {} weights in {} groups",
                phi.len(),
                groups.len(),
                num_groups
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("variational parameters".into()));
        }
        Ok(Self {
            groups,
            num_groups,
            phi,
        })
    }

    pub fn num_phi(&self) -> usize {
        self.phi.len()
    }
}

/// Fresh posterior for a network of the given shape.
///
/// Group factors start with median 1; the global factor's location is chosen
/// so that the median weight magnitude is `init.median_weight` (default `τ₀`).
pub fn init_posterior(
    shape: NetShape,
    prior: &HorseshoePrior,
    init: &InitConfig,
    rng: &mut StreamRng,
) -> Result<VariationalPosterior> {
    shape.validate()?;
    init_posterior_for_groups(shape.groups(), prior, init, rng)
}

pub fn init_posterior_for_groups(
    groups: Vec<u32>,
    prior: &HorseshoePrior,
    init: &InitConfig,
    rng: &mut StreamRng,
) -> Result<VariationalPosterior> {
    if !(prior.tau0 > 0.0) {
        return Err(Error::InvalidParameter("tau0 must be positive".into()));
    }
    let p = groups.len();
    let num_groups = groups.iter().map(|&g| g as usize + 1).max().unwrap_or(0);
    let loc = Normal::new(0.0, init.weight_loc_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut phi = Vec::with_capacity(2 * p + 2 * num_groups + 2);
    phi.extend((0..p).map(|_| loc.sample(rng)));
    phi.extend(std::iter::repeat_n(init.weight_scale.ln(), p));
    phi.extend(std::iter::repeat_n(0.0, num_groups));
    phi.extend(std::iter::repeat_n(init.factor_scale.ln(), num_groups));
    // |θ̃| ≈ |N(0, loc_sd² + scale²)| has median 0.6745·sd
    let theta_tilde_median = 0.674_489_750_196_081_7 * init.weight_loc_sd.hypot(init.weight_scale);
    let target = init.median_weight;
    if !(target > 0.0) {
        return Err(Error::InvalidParameter("median_weight must be positive".into()));
    }
    phi.push((target / theta_tilde_median).ln());
    phi.push(init.factor_scale.ln());
    VariationalPosterior::new(groups, phi)
}

/// A reparametrized draw and the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub theta: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    pub group_scale: Vec<f64>,
    pub global_scale: f64,
    pub weight_eps: Vec<f64>,
    pub group_eps: Vec<f64>,
    pub global_eps: f64,
}

impl PosteriorSample {
    pub fn to_params(&self, shape: NetShape) -> Result<NetParams> {
        NetParams::from_vec(shape, self.theta.clone())
    }
}

fn compose(q: &VariationalPosterior, weight_eps: Vec<f64>, group_eps: Vec<f64>, global_eps: f64) -> PosteriorSample {
    let theta_tilde: Vec<f64> = q
        .weight_loc()
        .iter()
        .zip(q.weight_log_scale())
        .zip(&weight_eps)
        .map(|((m, ls), e)| m + ls.exp() * e)
        .collect();
    let group_scale: Vec<f64> = q
        .group_loc()
        .iter()
        .zip(q.group_log_scale())
        .zip(&group_eps)
        .map(|((m, ls), e)| (m + ls.exp() * e).exp())
        .collect();
    let global_scale = (q.global_loc() + q.global_log_scale().exp() * global_eps).exp();
    let theta = theta_tilde
        .iter()
        .zip(&q.groups)
        .map(|(t, &g)| t * group_scale[g as usize] * global_scale)
        .collect();
    PosteriorSample {
        theta,
        theta_tilde,
        group_scale,
        global_scale,
        weight_eps,
        group_eps,
        global_eps,
    }
}

/// Draws all factors through `location + scale·ε`.
pub fn sample_params(q: &VariationalPosterior, rng: &mut StreamRng) -> PosteriorSample {
    let mut draw = || -> f64 { StandardNormal.sample(rng) };
    let weight_eps = (0..q.num_weights()).map(|_| draw()).collect();
    let group_eps = (0..q.num_groups).map(|_| draw()).collect();
    let global_eps = draw();
    compose(q, weight_eps, group_eps, global_eps)
}

/// Rebuilds a sample from stored noise.
pub fn sample_with_noise(
    q: &VariationalPosterior,
    weight_eps: Vec<f64>,
    group_eps: Vec<f64>,
    global_eps: f64,
) -> Result<PosteriorSample> {
    if weight_eps.len() != q.num_weights() || group_eps.len() != q.num_groups {
        return Err(Error::ShapeMismatch("noise vectors do not match posterior".into()));
    }
    Ok(compose(q, weight_eps, group_eps, global_eps))
}

/// Mode of every factor, composed multiplicatively: Gaussian mode `μ`,
/// log-normal mode `exp(m − λ²)`.
pub fn map_weights(q: &VariationalPosterior) -> Vec<f64> {
    let group_mode: Vec<f64> = q
        .group_loc()
        .iter()
        .zip(q.group_log_scale())
        .map(|(m, ls)| (m - (2.0 * ls).exp()).exp())
        .collect();
    let global_mode = (q.global_loc() - (2.0 * q.global_log_scale()).exp()).exp();
    q.weight_loc()
        .iter()
        .zip(&q.groups)
        .map(|(m, &g)| m * group_mode[g as usize] * global_mode)
        .collect()
}

pub fn map_params(q: &VariationalPosterior, shape: NetShape) -> Result<NetParams> {
    NetParams::from_vec(shape, map_weights(q))
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` summed over all θ̃.
pub fn gaussian_kl(q: &VariationalPosterior) -> f64 {
    q.weight_loc()
        .iter()
        .zip(q.weight_log_scale())
        .map(|(m, ls)| 0.5 * (m * m + (2.0 * ls).exp() - 1.0) - ls)
        .sum()
}

/// `log q(x) − log p(x)` for a log-normal factor `x = exp(m + λη)` against
/// `C⁺(0, γ)`.
fn scale_factor_log_ratio(loc: f64, log_scale: f64, eps: f64, gamma: f64) -> f64 {
    let lam = log_scale.exp();
    let log_x = loc + lam * eps;
    let log_q = -log_x - log_scale - HALF_LN_2PI - 0.5 * eps * eps;
    log_q - half_cauchy_log_pdf(log_x, gamma)
}

/// Gradient of [`scale_factor_log_ratio`] with respect to `(m, log λ)`.
fn scale_factor_log_ratio_grad(loc: f64, log_scale: f64, eps: f64, gamma: f64) -> (f64, f64) {
    let lam = log_scale.exp();
    let log_x = loc + lam * eps;
    // d/d log x of log(1 + x²/γ²)
    let w = 2.0 * sigmoid(2.0 * (log_x - gamma.ln()));
    let d_loc = -1.0 + w;
    let d_log_scale = -1.0 + lam * eps * (w - 1.0);
    (d_loc, d_log_scale)
}

fn scale_factors_log_ratio(
    q: &VariationalPosterior,
    prior: &HorseshoePrior,
    group_eps: &[f64],
    global_eps: f64,
) -> f64 {
    let groups: f64 = q
        .group_loc()
        .iter()
        .zip(q.group_log_scale())
        .zip(group_eps)
        .map(|((&m, &ls), &e)| scale_factor_log_ratio(m, ls, e, 1.0))
        .sum();
    groups + scale_factor_log_ratio(q.global_loc(), q.global_log_scale(), global_eps, prior.tau0)
}

/// KL estimate split into its exact and sampled parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub gaussian: f64,
    pub scale_factors: f64,
    /// standard error of the sampled part
    pub scale_factors_se: f64,
}

impl KlEstimate {
    pub fn total(&self) -> f64 {
        self.gaussian + self.scale_factors
    }
}

/// `KL(q ‖ p)` with the scale-factor part averaged over `n_mc` fresh draws.
pub fn kl_divergence(
    q: &VariationalPosterior,
    prior: &HorseshoePrior,
    rng: &mut StreamRng,
    n_mc: usize,
) -> Result<KlEstimate> {
    if n_mc == 0 {
        return Err(Error::InvalidParameter("n_mc must be at least 1".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut group_eps = vec![0.0; q.num_groups];
    for _ in 0..n_mc {
        for e in group_eps.iter_mut() {
            *e = StandardNormal.sample(rng);
        }
        let global_eps: f64 = StandardNormal.sample(rng);
        let v = scale_factors_log_ratio(q, prior, &group_eps, global_eps);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_mc as f64;
    let mean = sum / n;
    let se = if n_mc > 1 {
        ((sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    Ok(KlEstimate {
        gaussian: gaussian_kl(q),
        scale_factors: mean,
        scale_factors_se: se,
    })
}

/// Single-sample KL (exact Gaussian part plus the scale-factor log ratio at
/// the sample's own noise) and its gradient with respect to `φ`.
pub fn kl_gradient(q: &VariationalPosterior, prior: &HorseshoePrior, sample: &PosteriorSample) -> (f64, Vec<f64>) {
    let (p, g) = (q.num_weights(), q.num_groups);
    let mut grad = vec![0.0; q.num_phi()];
    for j in 0..p {
        let m = q.weight_loc()[j];
        let ls = q.weight_log_scale()[j];
        grad[j] = m;
        grad[p + j] = (2.0 * ls).exp() - 1.0;
    }
    for k in 0..g {
        let (dm, dl) = scale_factor_log_ratio_grad(q.group_loc()[k], q.group_log_scale()[k], sample.group_eps[k], 1.0);
        grad[2 * p + k] = dm;
        grad[2 * p + g + k] = dl;
    }
    let (dm, dl) = scale_factor_log_ratio_grad(q.global_loc(), q.global_log_scale(), sample.global_eps, prior.tau0);
    grad[2 * p + 2 * g] = dm;
    grad[2 * p + 2 * g + 1] = dl;
    let value = gaussian_kl(q) + scale_factors_log_ratio(q, prior, &sample.group_eps, sample.global_eps);
    (value, grad)
}

/// Pulls `∂L/∂θ` back through the reparametrization to `∂L/∂φ`.
pub fn likelihood_gradient(q: &VariationalPosterior, sample: &PosteriorSample, theta_grad: &[f64]) -> Result<Vec<f64>> {
    let (p, g) = (q.num_weights(), q.num_groups);
    if theta_grad.len() != p || sample.theta.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "weight gradient of length {} for {} weights",
            theta_grad.len(),
            p
        )));
    }
    let mut grad = vec![0.0; q.num_phi()];
    let mut group_acc = vec![0.0; g];
    let mut global_acc = 0.0;
    for j in 0..p {
        let gid = q.groups[j] as usize;
        let gj = theta_grad[j];
        let scale = sample.group_scale[gid] * sample.global_scale;
        grad[j] = gj * scale;
        grad[p + j] = gj * scale * sample.weight_eps[j] * q.weight_log_scale()[j].exp();
        let contrib = gj * sample.theta[j];
        group_acc[gid] += contrib;
        global_acc += contrib;
    }
    for k in 0..g {
        grad[2 * p + k] = group_acc[k];
        grad[2 * p + g + k] = group_acc[k] * q.group_log_scale()[k].exp() * sample.group_eps[k];
    }
    grad[2 * p + 2 * g] = global_acc;
    grad[2 * p + 2 * g + 1] = global_acc * q.global_log_scale().exp() * sample.global_eps;
    Ok(grad)
}

/// Gradient of `L(θ(φ)) + kl_weight · KL̂(φ)` for one reparametrized sample.
/// Returns the gradient and the single-sample KL value.
pub fn grad_elbo_terms(
    q: &VariationalPosterior,
    prior: &HorseshoePrior,
    sample: &PosteriorSample,
    theta_grad: &[f64],
    kl_weight: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut grad = likelihood_gradient(q, sample, theta_grad)?;
    let (kl, kl_grad) = kl_gradient(q, prior, sample);
    if kl_weight != 0.0 {
        for (a, b) in grad.iter_mut().zip(kl_grad) {
            *a += kl_weight * b;
        }
    }
    Ok((grad, kl))
}
