//! Conjugate-Gaussian belief tracking over arm means and the exploration
//! factors derived from it.
//!
//! With a known reward-noise variance every arm's posterior stays Gaussian.
//! Two-armed beliefs reduce to three numbers: the value difference `V`, the
//! relative uncertainty `RU` (difference of posterior sds) and the total
//! uncertainty `TU` (root-sum-square of posterior sds). The fixed baseline
//! strategies are probit choice rules over those numbers.

use crate::bandit::{rollout, sample_task, Choice, EpisodeRng, Policy, StepRecord, TaskDistribution, Trajectory};
use crate::error::{Error, Result};
use crate::normal::phi;
use crate::rng::{stream, Purpose, StreamRng, HELDOUT};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Independent Gaussian posteriors over every arm mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub posterior_mean: Vec<f64>,
    pub posterior_var: Vec<f64>,
    pub reward_noise_var: f64,
}

/// Exploration factors of a two-armed belief.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub v: f64,
    pub ru: f64,
    pub tu: f64,
}

impl Factors {
    /// Probit regressors `(V, RU, V/TU)`.
    pub fn regressors(&self) -> [f64; 3] {
        [self.v, self.ru, self.v / self.tu]
    }
}

pub fn init_belief(dist: &TaskDistribution) -> Result<BeliefState> {
    if !(dist.mean_prior_sd > 0.0) || !(dist.reward_noise_sd > 0.0) {
        return Err(Error::InvalidParameter(
            "belief tracking needs positive prior and noise sds".into(),
        ));
    }
    Ok(BeliefState {
        posterior_mean: vec![dist.mean_prior_mu; dist.num_arms],
        posterior_var: vec![dist.mean_prior_sd.powi(2); dist.num_arms],
        reward_noise_var: dist.reward_noise_sd.powi(2),
    })
}

/// Normal-normal update of the observed arm; other arms are untouched.
pub fn update_belief(b: &BeliefState, action: usize, reward: f64) -> Result<BeliefState> {
    if action >= b.posterior_mean.len() {
        return Err(Error::InvalidArm {
            index: action,
            num_arms: b.posterior_mean.len(),
        });
    }
    if !reward.is_finite() {
        return Err(Error::NonFinite(format!("reward {reward}")));
    }
    let mut next = b.clone();
    let var = b.posterior_var[action];
    let new_var = 1.0 / (1.0 / var + 1.0 / b.reward_noise_var);
    next.posterior_var[action] = new_var;
    next.posterior_mean[action] = new_var * (b.posterior_mean[action] / var + reward / b.reward_noise_var);
    Ok(next)
}

pub fn compute_factors(b: &BeliefState) -> Result<Factors> {
    if b.posterior_mean.len() != 2 {
        return Err(Error::InvalidParameter(
            "factors are defined for two-armed beliefs".into(),
        ));
    }
    let sd0 = b.posterior_var[0].sqrt();
    let sd1 = b.posterior_var[1].sqrt();
    Ok(Factors {
        v: b.posterior_mean[0] - b.posterior_mean[1],
        ru: sd0 - sd1,
        tu: (b.posterior_var[0] + b.posterior_var[1]).sqrt(),
    })
}

/// The three fixed strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    ValueDirected,
    Thompson,
    Ucb,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::ValueDirected, Self::Thompson, Self::Ucb];

    /// The strategy written as coefficients on `(V, RU, V/TU)`.
    pub fn coefficients(self) -> [f64; 3] {
        match self {
            Self::ValueDirected => [1.0, 0.0, 0.0],
            Self::Thompson => [0.0, 0.0, 1.0],
            Self::Ucb => [1.0, 1.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ValueDirected => "value",
            Self::Thompson => "thompson",
            Self::Ucb => "ucb",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "value" | "value-directed" => Ok(Self::ValueDirected),
            "thompson" => Ok(Self::Thompson),
            "ucb" => Ok(Self::Ucb),
            other => Err(Error::InvalidParameter(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Probability of choosing arm 0 under a baseline strategy.
pub fn baseline_choice_prob(kind: BaselineKind, f: &Factors) -> f64 {
    match kind {
        BaselineKind::ValueDirected => phi(f.v),
        BaselineKind::Thompson => phi(f.v / f.tu),
        BaselineKind::Ucb => phi(f.v + f.ru),
    }
}

/// Probit choice rule `p(a = 0) = Φ(w · (V, RU, V/TU))` with belief tracking.
///
/// The fixed baselines are instances with their canonical coefficients; fitted
/// strategies use arbitrary `w`.
#[derive(Debug, Clone)]
pub struct ProbitPolicy {
    weights: [f64; 3],
    prior: BeliefState,
    belief: BeliefState,
    seen: usize,
}

impl ProbitPolicy {
    pub fn new(weights: [f64; 3], dist: &TaskDistribution) -> Result<Self> {
        let prior = init_belief(dist)?;
        Ok(Self {
            weights,
            belief: prior.clone(),
            prior,
            seen: 0,
        })
    }

    pub fn baseline(kind: BaselineKind, dist: &TaskDistribution) -> Result<Self> {
        Self::new(kind.coefficients(), dist)
    }

    pub fn weights(&self) -> [f64; 3] {
        self.weights
    }

    fn sync(&mut self, history: &[StepRecord]) -> Result<()> {
        if history.len() < self.seen {
            self.belief = self.prior.clone();
            self.seen = 0;
        }
        for s in &history[self.seen..] {
            self.belief = update_belief(&self.belief, s.action, s.reward)?;
        }
        self.seen = history.len();
        Ok(())
    }

    pub fn choice_prob(&self, f: &Factors) -> f64 {
        let x = f.regressors();
        phi(self.weights.iter().zip(x).map(|(w, x)| w * x).sum())
    }
}

impl Policy for ProbitPolicy {
    fn choose(&mut self, history: &[StepRecord], rng: &mut StreamRng) -> Result<Choice> {
        self.sync(history)?;
        let factors = compute_factors(&self.belief)?;
        let p0 = self.choice_prob(&factors);
        let u: f64 = rng.random();
        Ok(Choice {
            action: if u < p0 { 0 } else { 1 },
            q_values: None,
            factors: Some(factors),
        })
    }
}

/// Policy for a baseline strategy, usable with [`crate::bandit::rollout`].
pub fn baseline_policy(kind: BaselineKind, dist: &TaskDistribution) -> Result<ProbitPolicy> {
    ProbitPolicy::baseline(kind, dist)
}

/// `episodes` rollouts of a probit policy. Episode `e` draws its task and
/// noise from streams with index `HELDOUT | e`, the same ones model
/// evaluation uses.
pub fn simulate_probit(
    weights: [f64; 3],
    dist: &TaskDistribution,
    episodes: u64,
    seed: u64,
    source_tag: &str,
) -> Result<Vec<Trajectory>> {
    let mut policy = ProbitPolicy::new(weights, dist)?;
    (0..episodes)
        .map(|e| {
            let idx = HELDOUT | e;
            let task = sample_task(dist, &mut stream(seed, Purpose::Task, idx));
            let mut traj = rollout(&task, &mut policy, dist.horizon, &mut EpisodeRng::new(seed, idx))?;
            traj.source_tag = source_tag.to_string();
            traj.seed = seed;
            traj.episode = e;
            Ok(traj)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bandit::{rollout, sample_task, BanditTask, EpisodeRng};
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    fn default_belief() -> BeliefState {
        init_belief(&TaskDistribution::default()).unwrap()
    }

    #[test]
    fn default_prior() {
        let b = default_belief();
        assert_eq!(b.posterior_mean, vec![0.0, 0.0]);
        assert!((b.posterior_var[0] - 100.0).abs() < 1e-12);
        assert!((b.posterior_var[1] - 100.0).abs() < 1e-12);
        assert!((b.reward_noise_var - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_prior_sd_rejected() {
        let dist = TaskDistribution {
            mean_prior_sd: 0.0,
            ..Default::default()
        };
        assert!(init_belief(&dist).is_err());
    }

    #[test]
    fn update_closed_form() {
        let mut b = default_belief();
        b.reward_noise_var = 10.0;
        b.posterior_var = vec![100.0, 100.0];
        let zero = update_belief(&b, 0, 0.0).unwrap();
        assert_eq!(zero.posterior_mean[0], 0.0);
        assert!((zero.posterior_var[0] - 100.0 / 11.0).abs() < 1e-12);
        let eleven = update_belief(&b, 0, 11.0).unwrap();
        assert!((eleven.posterior_mean[0] - 10.0).abs() < 1e-12);
        assert_eq!(eleven.posterior_mean[1], b.posterior_mean[1]);
        assert_eq!(eleven.posterior_var[1].to_bits(), b.posterior_var[1].to_bits());
    }

    #[test]
    fn update_rejects_non_finite() {
        assert!(update_belief(&default_belief(), 0, f64::NAN).is_err());
        assert!(update_belief(&default_belief(), 2, 1.0).is_err());
    }

    #[test]
    fn factors_after_one_pull() {
        let b = update_belief(&default_belief(), 0, 3.0).unwrap();
        let f = compute_factors(&b).unwrap();
        // posterior variance 1/(1/100 + 1/10) = 100/11
        let want = (100.0f64 / 11.0).sqrt() - 10.0;
        assert!((f.ru - want).abs() < 1e-12);
        assert!(f.ru < 0.0);
        let sym = compute_factors(&default_belief()).unwrap();
        assert_eq!((sym.v, sym.ru), (0.0, 0.0));
        assert!((sym.tu - 200f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn baseline_probabilities() {
        let f = Factors {
            v: 0.0,
            ru: 0.0,
            tu: 3.0,
        };
        for kind in BaselineKind::ALL {
            assert_eq!(baseline_choice_prob(kind, &f), 0.5);
        }
        let f = Factors {
            v: 2.5,
            ru: 0.7,
            tu: 2.5,
        };
        assert!((baseline_choice_prob(BaselineKind::Thompson, &f) - 0.8413447460685429).abs() < 1e-15);
        let f = Factors {
            v: 2.5,
            ru: -2.5,
            tu: 1.0,
        };
        assert_eq!(baseline_choice_prob(BaselineKind::Ucb, &f), 0.5);
    }

    #[test]
    fn symmetric_task_gives_even_choice_frequency() {
        let dist = TaskDistribution::default();
        let task = BanditTask {
            arm_means: vec![0.0, 0.0],
            reward_noise_sd: 0.0,
        };
        for kind in BaselineKind::ALL {
            let mut pol = baseline_policy(kind, &dist).unwrap();
            let mut zeros = 0usize;
            let mut total = 0usize;
            for e in 0..1000 {
                let traj = rollout(&task, &mut pol, 10, &mut EpisodeRng::new(11, e)).unwrap();
                zeros += traj.actions().filter(|&a| a == 0).count();
                total += traj.steps.len();
            }
            let freq = zeros as f64 / total as f64;
            assert!((freq - 0.5).abs() <= 0.02, "{kind}: {freq}");
        }
    }

    #[test]
    fn thompson_finds_the_clearly_better_arm() {
        let dist = TaskDistribution::default();
        let task = BanditTask {
            arm_means: vec![30.0, -30.0],
            reward_noise_sd: dist.reward_noise_sd,
        };
        let mut pol = baseline_policy(BaselineKind::Thompson, &dist).unwrap();
        let hits = (0..1000)
            .filter(|&e| {
                let traj = rollout(&task, &mut pol, 10, &mut EpisodeRng::new(5, e)).unwrap();
                traj.steps[9].action == 0
            })
            .count();
        assert!(hits >= 950, "hits = {hits}");
    }

    #[test]
    fn baseline_policy_is_deterministic_given_seed() {
        let dist = TaskDistribution::default();
        let task = sample_task(&dist, &mut stream(1, Purpose::Task, 0));
        let run = || {
            let mut pol = baseline_policy(BaselineKind::Ucb, &dist).unwrap();
            rollout(&task, &mut pol, 10, &mut EpisodeRng::new(2, 0)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn variance_depends_only_on_counts() {
        let rewards = [3.0, -7.5, 12.0, 0.5, 4.0];
        let mut fwd = default_belief();
        let mut rev = default_belief();
        for (&a, &b) in rewards.iter().zip(rewards.iter().rev()) {
            fwd = update_belief(&fwd, 1, a).unwrap();
            rev = update_belief(&rev, 1, b).unwrap();
        }
        assert_eq!(fwd.posterior_var, rev.posterior_var);
        assert!((fwd.posterior_mean[1] - rev.posterior_mean[1]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn observed_variance_strictly_decreases(var in 0.01f64..1e4, noise in 0.01f64..1e3, r in -100.0f64..100.0, arm in 0usize..2) {
            let b = BeliefState { posterior_mean: vec![1.0, -2.0], posterior_var: vec![var, var * 2.0], reward_noise_var: noise };
            let n = update_belief(&b, arm, r).unwrap();
            prop_assert!(n.posterior_var[arm] < b.posterior_var[arm]);
            let other = 1 - arm;
            prop_assert_eq!(n.posterior_var[other].to_bits(), b.posterior_var[other].to_bits());
            prop_assert_eq!(n.posterior_mean[other].to_bits(), b.posterior_mean[other].to_bits());
        }

        #[test]
        fn thompson_is_scale_invariant(v in -50.0f64..50.0, s0 in 0.1f64..20.0, s1 in 0.1f64..20.0, c in 0.01f64..100.0) {
            let f = |v: f64, s0: f64, s1: f64| Factors { v, ru: s0 - s1, tu: (s0 * s0 + s1 * s1).sqrt() };
            let a = baseline_choice_prob(BaselineKind::Thompson, &f(v, s0, s1));
            let b = baseline_choice_prob(BaselineKind::Thompson, &f(c * v, c * s0, c * s1));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn choice_probabilities_are_complementary(v in -4.0f64..4.0, ru in -4.0f64..4.0, tu in 0.5f64..10.0) {
            let f = Factors { v, ru, tu };
            let mirrored = Factors { v: -v, ru: -ru, tu };
            for kind in BaselineKind::ALL {
                let p = baseline_choice_prob(kind, &f);
                prop_assert!(p > 0.0 && p < 1.0);
                prop_assert!((p + baseline_choice_prob(kind, &mirrored) - 1.0).abs() < 1e-15);
            }
        }
    }
}
