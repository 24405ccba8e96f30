//! Strategy identification: probit regression of choices on the exploration
//! factors, with Laplace-approximated coefficient uncertainty, and mean-shift
//! clustering of fitted coefficient vectors.

use crate::bandit::{TaskDistribution, Trajectory};
use crate::belief::{compute_factors, init_belief, update_belief, Factors};
use crate::error::{Error, Result};
use crate::normal::{log_phi, mills_ratio};
use serde::{Deserialize, Serialize};

/// Factors seen before a choice, and the choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChoiceObservation {
    pub factors: Factors,
    pub choice: usize,
}

impl ChoiceObservation {
    /// `+1` for arm 0, `−1` for arm 1.
    fn sign(&self) -> f64 {
        if self.choice == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Replays one episode through a belief that starts at the task prior and
/// records the factors in force before every choice. Rewards are only used
/// to update the chosen arm.
pub fn extract_observations<I>(steps: I, dist: &TaskDistribution) -> Result<Vec<ChoiceObservation>>
where
    I: IntoIterator<Item = (usize, Option<f64>)>,
{
    let mut belief = init_belief(dist)?;
    let mut out = Vec::new();
    for (t, (choice, reward)) in steps.into_iter().enumerate() {
        if choice > 1 {
            return Err(Error::InvalidArm {
                index: choice,
                num_arms: 2,
            });
        }
        let factors = compute_factors(&belief)?;
        out.push(ChoiceObservation { factors, choice });
        let reward = reward.ok_or_else(|| Error::InvalidParameter(format!("missing reward at trial {t}")))?;
        belief = update_belief(&belief, choice, reward)?;
    }
    Ok(out)
}

pub fn trajectory_observations(traj: &Trajectory, dist: &TaskDistribution) -> Result<Vec<ChoiceObservation>> {
    extract_observations(traj.steps.iter().map(|s| (s.action, Some(s.reward))), dist)
}

/// How a probit fit ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    /// the requested ridge failed; the result uses the fallback ridge
    RidgeFallback,
    /// even the fallback did not converge
    NotConverged,
}

impl FitStatus {
    pub fn name(self) -> &'static str {
        match self {
            FitStatus::Converged => "converged",
            FitStatus::RidgeFallback => "ridge-fallback",
            FitStatus::NotConverged => "not-converged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitFit {
    pub w: [f64; 3],
    pub covariance: [[f64; 3]; 3],
    pub log_likelihood: f64,
    pub n_obs: usize,
    pub ridge: f64,
    pub iterations: usize,
    pub status: FitStatus,
}

/// Ridge applied when the requested one does not give a converged fit.
pub const FALLBACK_RIDGE: f64 = 0.1;
const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 100;

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// `Σ log Φ(±w·x)` over the observations.
pub fn probit_log_likelihood(obs: &[ChoiceObservation], w: &[f64; 3]) -> f64 {
    obs.iter()
        .map(|o| log_phi(o.sign() * dot3(w, &o.factors.regressors())))
        .sum()
}

struct Derivatives {
    value: f64,
    grad: [f64; 3],
    hess: [[f64; 3]; 3],
}

/// Negative log posterior with ridge prior, and its derivatives.
fn derivatives(obs: &[ChoiceObservation], w: &[f64; 3], ridge: f64) -> Derivatives {
    let mut value = 0.5 * ridge * dot3(w, w);
    let mut grad = [ridge * w[0], ridge * w[1], ridge * w[2]];
    let mut hess = [[0.0; 3]; 3];
    for (i, row) in hess.iter_mut().enumerate() {
        row[i] = ridge;
    }
    for o in obs {
        let x = o.factors.regressors();
        let s = o.sign();
        let u = s * dot3(w, &x);
        value -= log_phi(u);
        let lam = mills_ratio(u);
        let curv = lam * (u + lam);
        for a in 0..3 {
            grad[a] -= s * lam * x[a];
            for b in 0..3 {
                hess[a][b] += curv * x[a] * x[b];
            }
        }
    }
    Derivatives { value, grad, hess }
}

/// Cholesky factor of a symmetric 3×3 matrix, if positive definite.
fn cholesky3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[[f64; 3]; 3], b: &[f64; 3]) -> [f64; 3] {
    let mut y = [0.0; 3];
    for i in 0..3 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = y[i];
        for k in i + 1..3 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn invert_spd(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let l = cholesky3(m)?;
    let mut inv = [[0.0; 3]; 3];
    for c in 0..3 {
        let mut e = [0.0; 3];
        e[c] = 1.0;
        let col = cholesky_solve(&l, &e);
        for r in 0..3 {
            inv[r][c] = col[r];
        }
    }
    // symmetrize rounding noise
    for r in 0..3 {
        for c in r + 1..3 {
            let v = 0.5 * (inv[r][c] + inv[c][r]);
            inv[r][c] = v;
            inv[c][r] = v;
        }
    }
    Some(inv)
}

/// Newton iterations with backtracking; `None` if the Hessian is singular
/// along the way.
fn newton(obs: &[ChoiceObservation], ridge: f64) -> Option<([f64; 3], Derivatives, usize, bool)> {
    let mut w = [0.0; 3];
    let mut d = derivatives(obs, &w, ridge);
    for it in 0..MAX_NEWTON {
        let gmax = d.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < GRAD_TOL {
            return Some((w, d, it, true));
        }
        let l = cholesky3(&d.hess)?;
        let step = cholesky_solve(&l, &d.grad);
        let mut t = 1.0;
        let mut accepted = false;
        // near the optimum the objective only moves by rounding noise
        let slack = 1e-12 * (1.0 + d.value.abs());
        for _ in 0..60 {
            let cand = [w[0] - t * step[0], w[1] - t * step[1], w[2] - t * step[2]];
            let dc = derivatives(obs, &cand, ridge);
            if dc.value.is_finite() && dc.value <= d.value + slack {
                w = cand;
                d = dc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let gmax = d.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            return Some((w, d, it + 1, gmax < GRAD_TOL));
        }
    }
    let gmax = d.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Some((w, d, MAX_NEWTON, gmax < GRAD_TOL))
}

fn finish(
    obs: &[ChoiceObservation],
    ridge: f64,
    w: [f64; 3],
    d: &Derivatives,
    iterations: usize,
    status: FitStatus,
) -> ProbitFit {
    let nan = [[f64::NAN; 3]; 3];
    ProbitFit {
        w,
        covariance: invert_spd(&d.hess).unwrap_or(nan),
        log_likelihood: probit_log_likelihood(obs, &w),
        n_obs: obs.len(),
        ridge,
        iterations,
        status,
    }
}

/// Maximum a posteriori probit fit of `p(a = 0) = Φ(w·(V, RU, V/TU))` under a
/// `N(0, 1/ridge)` prior on each coefficient. The covariance is the inverse
/// Hessian of the negative log posterior at the optimum.
///
/// Separable or otherwise non-converging data are refit with
/// [`FALLBACK_RIDGE`] and flagged through [`ProbitFit::status`].
pub fn fit_probit(obs: &[ChoiceObservation], ridge: f64) -> Result<ProbitFit> {
    if obs.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "probit fit needs at least 3 observations, got {}",
            obs.len()
        )));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidParameter("ridge must be non-negative".into()));
    }
    if let Some((w, d, it, true)) = newton(obs, ridge) {
        if cholesky3(&d.hess).is_some() {
            return Ok(finish(obs, ridge, w, &d, it, FitStatus::Converged));
        }
    }
    let fallback = ridge.max(FALLBACK_RIDGE);
    match newton(obs, fallback) {
        Some((w, d, it, converged)) => {
            let status = if converged {
                FitStatus::RidgeFallback
            } else {
                FitStatus::NotConverged
            };
            Ok(finish(obs, fallback, w, &d, it, status))
        }
        None => Err(Error::DegenerateFit("singular Hessian even with fallback ridge".into())),
    }
}

/// Laplace standard deviations of the coefficients.
pub fn coefficient_sd(fit: &ProbitFit) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let v = fit.covariance[i][i];
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::DegenerateFit(format!("covariance diagonal {i} is {v}")));
        }
        *o = v.sqrt();
    }
    Ok(out)
}

/// Mean-shift clustering outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub modes: Vec<[f64; 3]>,
    pub bandwidth: f64,
}

impl ClusterResult {
    pub fn members(&self, cluster_id: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &c)| c == cluster_id)
            .map(|(i, _)| i)
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

const SHIFT_TOL: f64 = 1e-6;
const MAX_SHIFT_ITERS: usize = 10_000;

/// Gaussian-kernel mean shift started from every point. Converged points
/// closer than `bandwidth/2` to an existing mode join it; otherwise they open
/// a new mode.
pub fn mean_shift(points: &[[f64; 3]], bandwidth: f64) -> Result<ClusterResult> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidParameter(format!("bandwidth {bandwidth}")));
    }
    if points.is_empty() {
        return Err(Error::InvalidParameter("mean shift needs at least one point".into()));
    }
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let converged: Vec<[f64; 3]> = points
        .iter()
        .map(|start| {
            let mut x = *start;
            for _ in 0..MAX_SHIFT_ITERS {
                let mut num = [0.0; 3];
                let mut den = 0.0;
                for p in points {
                    let k = (-dist2(&x, p) * inv2h2).exp();
                    den += k;
                    for d in 0..3 {
                        num[d] += k * p[d];
                    }
                }
                let next = [num[0] / den, num[1] / den, num[2] / den];
                let moved = dist2(&next, &x).sqrt();
                x = next;
                if moved < SHIFT_TOL {
                    break;
                }
            }
            x
        })
        .collect();

    let merge = bandwidth / 2.0;
    let mut modes: Vec<[f64; 3]> = Vec::new();
    let assignments = converged
        .iter()
        .map(|c| {
            match modes
                .iter()
                .enumerate()
                .map(|(i, m)| (i, dist2(m, c).sqrt()))
                .filter(|&(_, d)| d < merge)
                .min_by(|a, b| a.1.total_cmp(&b.1))
            {
                Some((i, _)) => i,
                None => {
                    modes.push(*c);
                    modes.len() - 1
                }
            }
        })
        .collect();
    Ok(ClusterResult {
        assignments,
        modes,
        bandwidth,
    })
}

/// Silverman's rule of thumb per coordinate, averaged over the three
/// coordinates. Falls back to 1 when the points have no spread.
pub fn silverman_bandwidth(points: &[[f64; 3]]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 1.0;
    }
    let factor = (4.0 / (5.0 * n as f64)).powf(1.0 / 7.0);
    let mut total = 0.0;
    for d in 0..3 {
        let mean = points.iter().map(|p| p[d]).sum::<f64>() / n as f64;
        let var = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt() * factor;
    }
    let bw = total / 3.0;
    if bw > 0.0 && bw.is_finite() {
        bw
    } else {
        1.0
    }
}

/// Index of the member whose coefficients lie closest to the cluster mode;
/// ties go to the lower index.
pub fn prototype_of(clusters: &ClusterResult, fits: &[ProbitFit], cluster_id: usize) -> Result<usize> {
    let mode = clusters
        .modes
        .get(cluster_id)
        .ok_or_else(|| Error::InvalidParameter(format!("no cluster {cluster_id}")))?;
    clusters
        .members(cluster_id)
        .filter(|&i| i < fits.len())
        .map(|i| (i, dist2(&fits[i].w, mode)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidParameter(format!("cluster {cluster_id} is empty")))
}

/// One row of the coefficient export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub entity_id: String,
    pub kind: String,
    pub nhat: Option<u32>,
    pub seed: Option<u64>,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub sd1: f64,
    pub sd2: f64,
    pub sd3: f64,
    pub loglik: f64,
    pub n_obs: usize,
    pub status: String,
}

impl CoefficientRow {
    pub fn from_fit(entity_id: &str, kind: &str, nhat: Option<u32>, seed: Option<u64>, fit: &ProbitFit) -> Self {
        let sd = coefficient_sd(fit).unwrap_or([f64::NAN; 3]);
        Self {
            entity_id: entity_id.to_string(),
            kind: kind.to_string(),
            nhat,
            seed,
            w1: fit.w[0],
            w2: fit.w[1],
            w3: fit.w[2],
            sd1: sd[0],
            sd2: sd[1],
            sd3: sd[2],
            loglik: fit.log_likelihood,
            n_obs: fit.n_obs,
            status: fit.status.name().to_string(),
        }
    }

    pub fn w(&self) -> [f64; 3] {
        [self.w1, self.w2, self.w3]
    }
}
