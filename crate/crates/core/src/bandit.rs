//! Gaussian multi-armed bandit tasks, episode rollouts and regret.

use crate::belief::Factors;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};

/// Generative prior over bandit tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskDistribution {
    pub mean_prior_mu: f64,
    pub mean_prior_sd: f64,
    pub reward_noise_sd: f64,
    pub horizon: usize,
    pub num_arms: usize,
}

impl Default for TaskDistribution {
    fn default() -> Self {
        Self {
            mean_prior_mu: 0.0,
            mean_prior_sd: 10.0,
            reward_noise_sd: 10f64.sqrt(),
            horizon: 10,
            num_arms: 2,
        }
    }
}

impl TaskDistribution {
    /// Checks the invariants. A zero prior sd is accepted here (degenerate
    /// tasks are useful in tests) but rejected by belief tracking.
    pub fn validate(&self) -> Result<()> {
        let ok = self.mean_prior_sd >= 0.0
            && self.mean_prior_sd.is_finite()
            && self.reward_noise_sd >= 0.0
            && self.reward_noise_sd.is_finite()
            && self.mean_prior_mu.is_finite()
            && self.horizon >= 1
            && self.num_arms >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("task distribution {self:?}")))
        }
    }
}

/// One concrete task: latent arm means plus reward noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTask {
    pub arm_means: Vec<f64>,
    pub reward_noise_sd: f64,
}

impl BanditTask {
    pub fn num_arms(&self) -> usize {
        self.arm_means.len()
    }

    pub fn best_mean(&self) -> f64 {
        self.arm_means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Draws each arm mean independently from `N(mean_prior_mu, mean_prior_sd²)`.
pub fn sample_task(dist: &TaskDistribution, rng: &mut StreamRng) -> BanditTask {
    let arm_means = (0..dist.num_arms)
        .map(|_| {
            let e: f64 = rand_distr::StandardNormal.sample(rng);
            dist.mean_prior_mu + dist.mean_prior_sd * e
        })
        .collect();
    BanditTask {
        arm_means,
        reward_noise_sd: dist.reward_noise_sd,
    }
}

/// Pulls `action` once.
pub fn step(task: &BanditTask, action: usize, rng: &mut StreamRng) -> Result<f64> {
    let mean = *task.arm_means.get(action).ok_or(Error::InvalidArm {
        index: action,
        num_arms: task.num_arms(),
    })?;
    if task.reward_noise_sd == 0.0 {
        return Ok(mean);
    }
    let noise = Normal::new(0.0, task.reward_noise_sd).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(mean + noise.sample(rng))
}

/// One step of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub action: usize,
    pub reward: f64,
    pub q_values: Option<Vec<f64>>,
    pub belief_factors: Option<Factors>,
}

/// A policy's decision, with whatever internals it wants recorded.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub action: usize,
    pub q_values: Option<Vec<f64>>,
    pub factors: Option<Factors>,
}

impl Choice {
    pub fn action(action: usize) -> Self {
        Self {
            action,
            q_values: None,
            factors: None,
        }
    }
}

/// Anything that picks an arm given the episode history so far.
///
/// `history` is empty at the first step of every episode; implementations
/// that cache state must reset it then.
pub trait Policy {
    fn choose(&mut self, history: &[StepRecord], rng: &mut StreamRng) -> Result<Choice>;
}

impl<F> Policy for F
where
    F: FnMut(&[StepRecord], &mut StreamRng) -> usize,
{
    fn choose(&mut self, history: &[StepRecord], rng: &mut StreamRng) -> Result<Choice> {
        Ok(Choice::action(self(history, rng)))
    }
}

/// Complete record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: BanditTask,
    pub steps: Vec<StepRecord>,
    pub source_tag: String,
    pub seed: u64,
    pub episode: u64,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().map(|s| s.action)
    }
}

/// Separate reward-noise and policy-noise streams for one episode.
pub struct EpisodeRng {
    pub reward: StreamRng,
    pub policy: StreamRng,
}

impl EpisodeRng {
    pub fn new(seed: u64, episode: u64) -> Self {
        Self {
            reward: stream(seed, Purpose::RewardNoise, episode),
            policy: stream(seed, Purpose::Policy, episode),
        }
    }
}

/// Plays one episode of `horizon` steps.
pub fn rollout<P: Policy + ?Sized>(
    task: &BanditTask,
    policy: &mut P,
    horizon: usize,
    rng: &mut EpisodeRng,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let mut steps: Vec<StepRecord> = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let choice = policy.choose(&steps, &mut rng.policy)?;
        let reward = step(task, choice.action, &mut rng.reward)?;
        steps.push(StepRecord {
            step_index: t,
            action: choice.action,
            reward,
            q_values: choice.q_values,
            belief_factors: choice.factors,
        });
    }
    Ok(Trajectory {
        task: task.clone(),
        steps,
        source_tag: String::new(),
        seed: 0,
        episode: 0,
    })
}

/// Pseudo-regret of an episode: `Σ_t (max_a μ_a − μ_{a_t})`.
pub fn episode_regret(traj: &Trajectory) -> f64 {
    let best = traj.task.best_mean();
    traj.steps.iter().map(|s| best - traj.task.arm_means[s.action]).sum()
}

/// Analytic expected pseudo-regret of any policy that ignores rewards on
/// two-armed tasks: `T/2 · E|μ₀ − μ₁|`.
pub fn reward_blind_regret(dist: &TaskDistribution) -> f64 {
    let gap_sd = dist.mean_prior_sd * std::f64::consts::SQRT_2;
    let mean_abs_gap = gap_sd * (2.0 / std::f64::consts::PI).sqrt();
    dist.horizon as f64 / 2.0 * mean_abs_gap
}

/// One row of the trajectory CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub source_tag: String,
    pub seed: u64,
    pub episode: u64,
    pub trial: usize,
    pub action: usize,
    pub reward: f64,
    pub mu0: f64,
    pub mu1: f64,
    pub q0: Option<f64>,
    pub q1: Option<f64>,
}

pub const TRAJECTORY_HEADER: [&str; 10] = [
    "source_tag",
    "seed",
    "episode",
    "trial",
    "action",
    "reward",
    "mu0",
    "mu1",
    "q0",
    "q1",
];

/// Writes trajectories of two-armed tasks as CSV.
pub fn write_trajectories<W: Write>(out: W, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRAJECTORY_HEADER)?;
    for traj in trajs {
        if traj.task.num_arms() != 2 {
            return Err(Error::InvalidParameter(
                "trajectory CSV export requires two-armed tasks".into(),
            ));
        }
        for s in &traj.steps {
            let (q0, q1) = match &s.q_values {
                Some(q) if q.len() == 2 => (Some(q[0]), Some(q[1])),
                _ => (None, None),
            };
            w.serialize(TrajectoryRow {
                source_tag: traj.source_tag.clone(),
                seed: traj.seed,
                episode: traj.episode,
                trial: s.step_index,
                action: s.action,
                reward: s.reward,
                mu0: traj.task.arm_means[0],
                mu1: traj.task.arm_means[1],
                q0,
                q1,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a trajectory CSV back, grouping rows by `(source_tag, seed, episode)`
/// in file order.
pub fn read_trajectories<R: Read>(input: R, reward_noise_sd: f64) -> Result<Vec<Trajectory>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(TRAJECTORY_HEADER.iter().copied()) {
        return Err(Error::Malformed {
            line: 1,
            reason: format!("unexpected header {headers:?}"),
        });
    }
    let mut order: Vec<(String, u64, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, u64, u64), Trajectory> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<TrajectoryRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Malformed {
            line,
            reason: e.to_string(),
        })?;
        if row.action > 1 {
            return Err(Error::Malformed {
                line,
                reason: format!("action {} out of range", row.action),
            });
        }
        if !row.reward.is_finite() {
            return Err(Error::Malformed {
                line,
                reason: "non-finite reward".into(),
            });
        }
        let key = (row.source_tag.clone(), row.seed, row.episode);
        let traj = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Trajectory {
                task: BanditTask {
                    arm_means: vec![row.mu0, row.mu1],
                    reward_noise_sd,
                },
                steps: Vec::new(),
                source_tag: row.source_tag.clone(),
                seed: row.seed,
                episode: row.episode,
            }
        });
        if traj.steps.last().is_some_and(|s| s.step_index >= row.trial) {
            return Err(Error::Malformed {
                line,
                reason: "trial indices must increase within an episode".into(),
            });
        }
        let q_values = match (row.q0, row.q1) {
            (Some(a), Some(b)) => Some(vec![a, b]),
            _ => None,
        };
        traj.steps.push(StepRecord {
            step_index: row.trial,
            action: row.action,
            reward: row.reward,
            q_values,
            belief_factors: None,
        });
    }
    Ok(order
        .into_iter()
        .map(|k| groups.remove(&k).expect("grouped key"))
        .collect())
}
