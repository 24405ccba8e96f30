//! Meta-training of the variational posterior with n-step Q-learning targets.
//!
//! Every training episode runs `parallel_envs` bandit tasks side by side. Each
//! environment draws its own network from the posterior at episode start and
//! acts greedily with it for the whole episode. Targets come from the MAP
//! network, refreshed every `target_sync_every` episodes. The loss is the
//! per-transition squared TD error over `2σ_y²` plus `KL(q‖p)/N̂`, estimated
//! with one further posterior sample shared by all transitions of the batch.

use crate::bandit::{
    episode_regret, reward_blind_regret, rollout, sample_task, EpisodeRng, TaskDistribution, Trajectory,
};
use crate::error::{Error, Result};
use crate::net::{backward_episode, encode_episode, forward_episode, NetParams, NetPolicy, NetShape};
use crate::rng::{stream, Purpose, HELDOUT};
use crate::varbayes::{
    grad_elbo_terms, init_posterior, kl_divergence, map_params, sample_params, HorseshoePrior, InitConfig, KlEstimate,
    VariationalPosterior,
};
use serde::{Deserialize, Serialize};

/// Training hyperparameters. `nhat = None` trains the unconstrained model
/// (KL weight exactly zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub nhat: Option<u32>,
    pub sigma_y: f64,
    pub n_step: usize,
    pub gamma: f64,
    pub parallel_envs: usize,
    pub episodes_total: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub target_sync_every: u64,
    pub seed: u64,
    pub hidden_dim: usize,
    pub reward_scale: f64,
    pub tau0: f64,
    pub init: InitConfig,
    /// diagnostics are averaged over windows of this many episodes
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            nhat: Some(1024),
            sigma_y: 1.0,
            n_step: 5,
            gamma: 0.95,
            parallel_envs: 16,
            episodes_total: 10_000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            target_sync_every: 100,
            seed: 0,
            hidden_dim: 64,
            reward_scale: 10.0,
            tau0: 1e-5,
            init: InitConfig::default(),
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn kl_weight(&self) -> f64 {
        match self.nhat {
            Some(n) => 1.0 / n as f64,
            None => 0.0,
        }
    }

    pub fn prior(&self) -> HorseshoePrior {
        HorseshoePrior { tau0: self.tau0 }
    }

    pub fn shape(&self, dist: &TaskDistribution) -> NetShape {
        NetShape::for_bandit(dist.num_arms, self.hidden_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("train config: {what}")));
        if self.nhat == Some(0) {
            return bad("nhat must be positive");
        }
        if !(self.sigma_y > 0.0) {
            return bad("sigma_y must be positive");
        }
        if self.n_step < 1 {
            return bad("n_step must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.parallel_envs < 1 || self.hidden_dim < 1 || self.target_sync_every < 1 || self.log_every < 1 {
            return bad("counts must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.reward_scale > 0.0) || !(self.tau0 > 0.0) {
            return bad("learning rate, reward scale and tau0 out of range");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_epsilon > 0.0)
        {
            return bad("adam constants out of range");
        }
        Ok(())
    }
}

/// n-step returns, truncated at the episode end: when `t + n ≥ T` the target
/// is the discounted sum of the remaining rewards with no bootstrap.
pub fn nstep_targets(rewards: &[f64], target_q: &[Vec<f64>], n: usize, gamma: f64) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(Error::InvalidParameter("n must be at least 1".into()));
    }
    if rewards.len() != target_q.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rewards against {} target rows",
            rewards.len(),
            target_q.len()
        )));
    }
    let horizon = rewards.len();
    Ok((0..horizon)
        .map(|t| {
            let end = (t + n).min(horizon);
            let mut y = 0.0;
            let mut discount = 1.0;
            for r in &rewards[t..end] {
                y += discount * r;
                discount *= gamma;
            }
            if t + n < horizon {
                let best = target_q[t + n].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                y += discount * best;
            }
            y
        })
        .collect())
}

/// One complete environment episode, in network (scaled) units.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub inputs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub targets: Vec<f64>,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub episodes: Vec<EpisodeBatch>,
}

impl TransitionBatch {
    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.actions.len()).sum()
    }

    pub fn mean_regret(&self) -> f64 {
        self.episodes.iter().map(|e| e.regret).sum::<f64>() / self.episodes.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Windowed training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub episode: u64,
    pub loss: f64,
    pub kl: f64,
    pub mean_regret_window: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub shape: NetShape,
    pub prior: HorseshoePrior,
    pub posterior: VariationalPosterior,
    pub target_params: NetParams,
    pub optimizer: Adam,
    pub episode: u64,
    pub diagnostics: Vec<DiagnosticRow>,
    pub(crate) window: (f64, f64, f64, u64),
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, dist: &TaskDistribution) -> Result<Self> {
        cfg.validate()?;
        dist.validate()?;
        let shape = cfg.shape(dist);
        let prior = cfg.prior();
        let posterior = init_posterior(shape, &prior, &cfg.init, &mut stream(cfg.seed, Purpose::Init, 0))?;
        Ok(Self::from_posterior(shape, prior, posterior))
    }

    pub fn from_posterior(shape: NetShape, prior: HorseshoePrior, posterior: VariationalPosterior) -> Self {
        let target_params = map_params(&posterior, shape).expect("posterior matches shape");
        let n = posterior.num_phi();
        Self {
            shape,
            prior,
            posterior,
            target_params,
            optimizer: Adam::new(n),
            episode: 0,
            diagnostics: Vec::new(),
            window: (0.0, 0.0, 0.0, 0),
        }
    }
}

/// Runs one training episode in `parallel_envs` environments.
///
/// Environment `i` of episode `e` uses stream index `e·k + i` for its task,
/// reward noise and network draw.
pub fn collect_episodes(state: &TrainState, cfg: &TrainConfig, dist: &TaskDistribution) -> Result<TransitionBatch> {
    let k = cfg.parallel_envs as u64;
    let episodes = (0..k)
        .map(|i| {
            let idx = state.episode * k + i;
            let task = sample_task(dist, &mut stream(cfg.seed, Purpose::Task, idx));
            let sample = sample_params(&state.posterior, &mut stream(cfg.seed, Purpose::RolloutSample, idx));
            let params = sample.to_params(state.shape)?;
            let mut policy = NetPolicy::new(&params, cfg.reward_scale);
            let traj = rollout(&task, &mut policy, dist.horizon, &mut EpisodeRng::new(cfg.seed, idx))?;
            episode_batch(&traj, &state.target_params, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionBatch { episodes })
}

fn episode_batch(traj: &Trajectory, target: &NetParams, cfg: &TrainConfig) -> Result<EpisodeBatch> {
    let actions: Vec<usize> = traj.actions().collect();
    let raw: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
    let inputs = encode_episode(traj.task.num_arms(), &actions, &raw, cfg.reward_scale);
    let rewards: Vec<f64> = raw.iter().map(|r| r / cfg.reward_scale).collect();
    let (target_q, _) = forward_episode(target, &inputs)?;
    let targets = nstep_targets(&rewards, &target_q, cfg.n_step, cfg.gamma)?;
    Ok(EpisodeBatch {
        inputs,
        actions,
        rewards,
        targets,
        regret: episode_regret(traj),
    })
}

/// Value of the training loss and its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub data_term: f64,
    pub kl: f64,
    pub kl_weight: f64,
}

impl LossValue {
    pub fn total(&self) -> f64 {
        self.data_term + self.kl_weight * self.kl
    }
}

/// Mean squared TD error over `2σ_y²` and its gradient with respect to the
/// network weights.
pub fn data_term(batch: &TransitionBatch, params: &NetParams, sigma_y: f64) -> Result<(f64, NetParams)> {
    let m = batch.num_transitions() as f64;
    let scale = 1.0 / (sigma_y * sigma_y * m);
    let mut total = 0.0;
    let mut grad = NetParams::zeros(params.shape);
    for ep in &batch.episodes {
        let (qs, tape) = forward_episode(params, &ep.inputs)?;
        let mut dq = vec![vec![0.0; params.shape.output_dim]; qs.len()];
        for t in 0..qs.len() {
            let err = qs[t][ep.actions[t]] - ep.targets[t];
            total += 0.5 * err * err * scale;
            dq[t][ep.actions[t]] = err * scale;
        }
        let g = backward_episode(params, &tape, &dq)?;
        for (a, b) in grad.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }
    Ok((total, grad))
}

/// Training loss for a given batch, posterior sample and KL value.
pub fn objective(batch: &TransitionBatch, params: &NetParams, kl: f64, cfg: &TrainConfig) -> Result<LossValue> {
    let (data, _) = data_term(batch, params, cfg.sigma_y)?;
    Ok(LossValue {
        data_term: data,
        kl,
        kl_weight: cfg.kl_weight(),
    })
}

/// One optimizer update on `batch`.
pub fn train_step(state: &mut TrainState, batch: &TransitionBatch, cfg: &TrainConfig) -> Result<LossValue> {
    let sample = sample_params(
        &state.posterior,
        &mut stream(cfg.seed, Purpose::LossSample, state.episode),
    );
    let params = sample.to_params(state.shape)?;
    let (data, theta_grad) = data_term(batch, &params, cfg.sigma_y)?;
    let (grad, kl) = grad_elbo_terms(
        &state.posterior,
        &state.prior,
        &sample,
        &theta_grad.data,
        cfg.kl_weight(),
    )?;
    let loss = LossValue {
        data_term: data,
        kl,
        kl_weight: cfg.kl_weight(),
    };
    if !loss.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss at episode {}: data {data}, kl {kl}",
            state.episode
        )));
    }
    state.optimizer.step(&mut state.posterior.phi, &grad, cfg);
    state.episode += 1;
    if state.episode % cfg.target_sync_every == 0 {
        state.target_params = map_params(&state.posterior, state.shape)?;
    }

    let w = &mut state.window;
    w.0 += loss.total();
    w.1 += kl;
    w.2 += batch.mean_regret();
    w.3 += 1;
    if state.episode % cfg.log_every == 0 {
        let n = w.3 as f64;
        state.diagnostics.push(DiagnosticRow {
            episode: state.episode,
            loss: w.0 / n,
            kl: w.1 / n,
            mean_regret_window: w.2 / n,
        });
        *w = (0.0, 0.0, 0.0, 0);
    }
    Ok(loss)
}

/// Trains from a fresh posterior for `cfg.episodes_total` episodes.
pub fn train(cfg: &TrainConfig, dist: &TaskDistribution) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, dist)?;
    train_more(&mut state, cfg, dist, cfg.episodes_total)?;
    Ok(state)
}

pub fn train_more(state: &mut TrainState, cfg: &TrainConfig, dist: &TaskDistribution, episodes: u64) -> Result<()> {
    for _ in 0..episodes {
        let batch = collect_episodes(state, cfg, dist)?;
        train_step(state, &batch, cfg)?;
    }
    Ok(())
}

/// How evaluation draws network parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// MAP parameters for every episode
    Map,
    /// a fresh posterior draw per episode, as during training
    PosteriorSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub trajectories: Vec<Trajectory>,
    pub regrets: Vec<f64>,
}

impl Evaluation {
    pub fn mean_regret(&self) -> f64 {
        self.regrets.iter().sum::<f64>() / self.regrets.len().max(1) as f64
    }

    pub fn regret_sd(&self) -> f64 {
        let n = self.regrets.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_regret();
        (self.regrets.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Greedy rollouts with fixed parameters per episode.
///
/// Episode `e` uses task, reward-noise and posterior streams with index
/// `HELDOUT | e` under `seed`, so models evaluated with the same seed face
/// the same tasks and none of them were seen in training.
pub fn evaluate(
    posterior: &VariationalPosterior,
    shape: NetShape,
    reward_scale: f64,
    dist: &TaskDistribution,
    episodes: u64,
    mode: EvalMode,
    seed: u64,
    source_tag: &str,
) -> Result<Evaluation> {
    let map = map_params(posterior, shape)?;
    let mut trajectories = Vec::with_capacity(episodes as usize);
    let mut regrets = Vec::with_capacity(episodes as usize);
    for e in 0..episodes {
        let idx = HELDOUT | e;
        let task = sample_task(dist, &mut stream(seed, Purpose::Task, idx));
        let drawn;
        let params = match mode {
            EvalMode::Map => &map,
            EvalMode::PosteriorSample => {
                drawn = sample_params(posterior, &mut stream(seed, Purpose::RolloutSample, idx)).to_params(shape)?;
                &drawn
            }
        };
        let mut policy = NetPolicy::new(params, reward_scale);
        let mut traj = rollout(&task, &mut policy, dist.horizon, &mut EpisodeRng::new(seed, idx))?;
        traj.source_tag = source_tag.to_string();
        traj.seed = seed;
        traj.episode = e;
        regrets.push(episode_regret(&traj));
        trajectories.push(traj);
    }
    Ok(Evaluation { trajectories, regrets })
}

/// KL of the current posterior with a large Monte Carlo sample, for reporting.
pub fn posterior_kl(state: &TrainState, seed: u64, n_mc: usize) -> Result<KlEstimate> {
    kl_divergence(
        &state.posterior,
        &state.prior,
        &mut stream(seed, Purpose::KlSample, 0),
        n_mc,
    )
}

/// Reference regret of a reward-blind policy on `dist`.
pub fn untrained_reference(dist: &TaskDistribution) -> f64 {
    reward_blind_regret(dist)
}
