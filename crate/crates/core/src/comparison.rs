//! Participant likelihoods and Bayes factors between a class of trained
//! models and fixed exploration strategies.

use crate::bandit::{rollout, sample_task, EpisodeRng, TaskDistribution};
use crate::belief::{BaselineKind, ProbitPolicy};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::strategy::{extract_observations, fit_probit, trajectory_observations, ChoiceObservation, ProbitFit};
use crate::trainer::EvalMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};

/// 2·log BF above which evidence counts as very strong.
pub const VERY_STRONG: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub enum HypothesisKind {
    Lrla { nhat: Option<u32>, seeds: Vec<u64> },
    Baseline(BaselineKind),
}

/// A probit choice model, or a uniform mixture of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub label: String,
    pub kind: HypothesisKind,
    pub members: Vec<[f64; 3]>,
}

pub fn nhat_label(nhat: Option<u32>) -> String {
    match nhat {
        Some(n) => n.to_string(),
        None => "inf".to_string(),
    }
}

impl Hypothesis {
    pub fn baseline(kind: BaselineKind) -> Self {
        Self {
            label: kind.name().to_string(),
            kind: HypothesisKind::Baseline(kind),
            members: vec![kind.coefficients()],
        }
    }

    /// One member per trained seed.
    pub fn lrla(nhat: Option<u32>, seeds: Vec<u64>, members: Vec<[f64; 3]>) -> Result<Self> {
        if members.is_empty() || members.len() != seeds.len() {
            return Err(Error::InvalidParameter(format!(
                "{} seeds for {} members",
                seeds.len(),
                members.len()
            )));
        }
        Ok(Self {
            label: format!("lrla-{}", nhat_label(nhat)),
            kind: HypothesisKind::Lrla { nhat, seeds },
            members,
        })
    }

    pub fn nhat(&self) -> Option<Option<u32>> {
        match &self.kind {
            HypothesisKind::Lrla { nhat, .. } => Some(*nhat),
            HypothesisKind::Baseline(_) => None,
        }
    }
}

/// Probit surrogate of a trained model: greedy episodes with a fresh
/// posterior draw each, fitted with the given ridge.
pub fn hypothesis_from_model(
    ckpt: &Checkpoint,
    dist: &TaskDistribution,
    sim_episodes: u64,
    ridge: f64,
    seed: u64,
) -> Result<ProbitFit> {
    let mut model = ckpt.clone();
    model.task = dist.clone();
    let eval = model.evaluate(sim_episodes, EvalMode::PosteriorSample, seed, "lrla")?;
    let mut obs = Vec::with_capacity(eval.trajectories.len() * dist.horizon);
    for traj in &eval.trajectories {
        obs.extend(trajectory_observations(traj, dist)?);
    }
    let first = obs.first().map(|o| o.choice);
    if obs.iter().all(|o| Some(o.choice) == first) {
        return Err(Error::DegenerateFit("simulated model always chose the same arm".into()));
    }
    fit_probit(&obs, ridge)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanEpisode {
    pub episode: i64,
    pub choices: Vec<usize>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Participant {
    pub id: i64,
    pub episodes: Vec<HumanEpisode>,
}

impl Participant {
    pub fn num_trials(&self) -> usize {
        self.episodes.iter().map(|e| e.choices.len()).sum()
    }

    /// Belief-factor observations over all episodes, each episode starting
    /// from the prior.
    pub fn observations(&self, dist: &TaskDistribution) -> Result<Vec<ChoiceObservation>> {
        let mut out = Vec::with_capacity(self.num_trials());
        for ep in &self.episodes {
            out.extend(extract_observations(
                ep.choices.iter().zip(&ep.rewards).map(|(&c, &r)| (c, Some(r))),
                dist,
            )?);
        }
        Ok(out)
    }
}

/// `Σ log Φ(±w·x)` over precomputed observations.
pub fn observations_loglik(obs: &[ChoiceObservation], w: &[f64; 3]) -> Result<f64> {
    let ll = crate::strategy::probit_log_likelihood(obs, w);
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("log-likelihood {ll} for w = {w:?}")));
    }
    Ok(ll)
}

pub fn participant_loglik(p: &Participant, w: &[f64; 3], dist: &TaskDistribution) -> Result<f64> {
    observations_loglik(&p.observations(dist)?, w)
}

/// `log((1/n) Σ exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + (s / xs.len() as f64).ln()
}

/// Member log-likelihoods of one hypothesis.
pub fn member_logliks(obs: &[ChoiceObservation], hyp: &Hypothesis) -> Result<Vec<f64>> {
    hyp.members.iter().map(|w| observations_loglik(obs, w)).collect()
}

pub fn marginal_loglik(obs: &[ChoiceObservation], hyp: &Hypothesis) -> Result<f64> {
    if hyp.members.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "hypothesis {} has no members",
            hyp.label
        )));
    }
    Ok(log_mean_exp(&member_logliks(obs, hyp)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesFactor {
    /// marginal log-likelihood of every class hypothesis
    pub class_marginals: Vec<f64>,
    pub class_loglik: f64,
    pub baseline_loglik: f64,
    pub log_bf: f64,
    pub two_log_bf: f64,
    /// index of the class hypothesis with the highest marginal
    pub best: usize,
}

impl BayesFactor {
    pub fn very_strong(&self) -> bool {
        self.two_log_bf > VERY_STRONG
    }
}

/// Class marginal: uniform mixture over the class hypotheses, each itself a
/// uniform mixture over its members.
pub fn bayes_factor(obs: &[ChoiceObservation], class: &[Hypothesis], baseline: &Hypothesis) -> Result<BayesFactor> {
    if class.is_empty() {
        return Err(Error::InvalidParameter("empty hypothesis class".into()));
    }
    let class_marginals = class
        .iter()
        .map(|h| marginal_loglik(obs, h))
        .collect::<Result<Vec<_>>>()?;
    let class_loglik = log_mean_exp(&class_marginals);
    let baseline_loglik = marginal_loglik(obs, baseline)?;
    let log_bf = class_loglik - baseline_loglik;
    let best = class_marginals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(BayesFactor {
        class_marginals,
        class_loglik,
        baseline_loglik,
        log_bf,
        two_log_bf: 2.0 * log_bf,
        best,
    })
}

/// `2·(Σ_i log p(D_i | class) − Σ_i log p(D_i | fixed))`.
pub fn population_bf(participants: &[Vec<ChoiceObservation>], class: &[Hypothesis], fixed: &Hypothesis) -> Result<f64> {
    let mut total = 0.0;
    for obs in participants {
        total += bayes_factor(obs, class, fixed)?.log_bf;
    }
    Ok(2.0 * total)
}

/// A synthetic participant that follows the probit policy `w`.
pub fn synthetic_participant(
    w: [f64; 3],
    dist: &TaskDistribution,
    episodes: u64,
    id: i64,
    seed: u64,
) -> Result<Participant> {
    let mut policy = ProbitPolicy::new(w, dist)?;
    let mut out = Vec::with_capacity(episodes as usize);
    for e in 0..episodes {
        let idx = (id as u64) << 32 | e;
        let task = sample_task(dist, &mut stream(seed, Purpose::Synthetic, idx));
        let traj = rollout(&task, &mut policy, dist.horizon, &mut EpisodeRng::new(seed, idx))?;
        out.push(HumanEpisode {
            episode: e as i64,
            choices: traj.steps.iter().map(|s| s.action).collect(),
            rewards: traj.steps.iter().map(|s| s.reward).collect(),
        });
    }
    Ok(Participant { id, episodes: out })
}

/// A rejected input row or episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowDiagnostic {
    /// 1-based line in the file; 0 for whole-episode rejections
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HumanData {
    pub participants: Vec<Participant>,
    pub diagnostics: Vec<RowDiagnostic>,
}

pub const HUMAN_REQUIRED: [&str; 5] = ["participant_id", "episode", "trial", "choice", "reward"];

/// Reads human choices. Bad rows and episodes whose trial count differs
/// from `horizon` are skipped and reported; participants come out sorted by
/// id and episodes by index.
pub fn load_human_data<R: Read>(input: R, horizon: usize) -> Result<HumanData> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(HumanData::default());
    }
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(HUMAN_REQUIRED) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| Error::Malformed {
            line: 1,
            reason: format!("missing column {name}"),
        })?;
    }
    let mut diagnostics = Vec::new();
    // (participant, episode) -> trial -> (choice, reward)
    let mut table: BTreeMap<(i64, i64), BTreeMap<i64, (usize, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                diagnostics.push(RowDiagnostic {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(cols[i]).unwrap_or("");
        let parsed = (|| -> std::result::Result<(i64, i64, i64, usize, f64), String> {
            let pid = field(0)
                .parse::<i64>()
                .map_err(|_| format!("bad participant_id {:?}", field(0)))?;
            let ep = field(1)
                .parse::<i64>()
                .map_err(|_| format!("bad episode {:?}", field(1)))?;
            let trial = field(2)
                .parse::<i64>()
                .map_err(|_| format!("bad trial {:?}", field(2)))?;
            let choice = field(3)
                .parse::<i64>()
                .map_err(|_| format!("bad choice {:?}", field(3)))?;
            if !(0..=1).contains(&choice) {
                return Err(format!("choice {choice} out of range"));
            }
            if field(4).is_empty() {
                return Err("missing reward".into());
            }
            let reward = field(4)
                .parse::<f64>()
                .map_err(|_| format!("bad reward {:?}", field(4)))?;
            if !reward.is_finite() {
                return Err(format!("non-finite reward {reward}"));
            }
            Ok((pid, ep, trial, choice as usize, reward))
        })();
        match parsed {
            Ok((pid, ep, trial, choice, reward)) => {
                let trials = table.entry((pid, ep)).or_default();
                if trials.insert(trial, (choice, reward)).is_some() {
                    diagnostics.push(RowDiagnostic {
                        line,
                        reason: format!("duplicate trial {trial}"),
                    });
                }
            }
            Err(reason) => diagnostics.push(RowDiagnostic { line, reason }),
        }
    }
    let mut participants: Vec<Participant> = Vec::new();
    for ((pid, ep), trials) in table {
        if trials.len() != horizon {
            diagnostics.push(RowDiagnostic {
                line: 0,
                reason: format!(
                    "participant {pid} episode {ep}: {} trials, expected {horizon}",
                    trials.len()
                ),
            });
            continue;
        }
        let episode = HumanEpisode {
            episode: ep,
            choices: trials.values().map(|t| t.0).collect(),
            rewards: trials.values().map(|t| t.1).collect(),
        };
        match participants.last_mut() {
            Some(p) if p.id == pid => p.episodes.push(episode),
            _ => participants.push(Participant {
                id: pid,
                episodes: vec![episode],
            }),
        }
    }
    Ok(HumanData {
        participants,
        diagnostics,
    })
}

/// Writes participants in the human-data schema.
pub fn write_human_data<W: Write>(out: W, participants: &[Participant]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HUMAN_REQUIRED)?;
    for p in participants {
        for ep in &p.episodes {
            for (t, (c, r)) in ep.choices.iter().zip(&ep.rewards).enumerate() {
                w.write_record([
                    p.id.to_string(),
                    ep.episode.to_string(),
                    t.to_string(),
                    c.to_string(),
                    r.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikRow {
    pub participant_id: i64,
    pub hypothesis: String,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesFactorRow {
    pub participant_id: i64,
    pub log_bf: f64,
    pub two_log_bf: f64,
    pub best_nhat: String,
    pub very_strong: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normal::phi;

    fn dist() -> TaskDistribution {
        TaskDistribution::default()
    }

    #[test]
    fn zero_weights_give_half_per_trial() {
        let p = synthetic_participant([0.3, 0.1, 0.8], &dist(), 20, 1, 0).unwrap();
        let ll = participant_loglik(&p, &[0.0; 3], &dist()).unwrap();
        assert!((ll - 200.0 * 0.5f64.ln()).abs() < 1e-9);
        assert!((ll + 138.629436111989).abs() < 1e-9);
    }

    #[test]
    fn hand_built_two_trials() {
        let p = Participant {
            id: 0,
            episodes: vec![HumanEpisode {
                episode: 0,
                choices: vec![1, 0],
                rewards: vec![4.4, 2.0],
            }],
        };
        let w = [0.3, -0.2, 0.7];
        // trial 1: all factors zero; trial 2 after arm 1 saw 4.4: mean 4, var 100/11
        let var: f64 = 100.0 / 11.0;
        let (v, ru, tu) = (-4.0, 10.0 - var.sqrt(), (100.0 + var).sqrt());
        let expect = phi(0.0).ln() + phi(w[0] * v + w[1] * ru + w[2] * v / tu).ln();
        let ll = participant_loglik(&p, &w, &dist()).unwrap();
        assert!((ll - expect).abs() < 1e-12, "{ll} vs {expect}");
    }

    #[test]
    fn saturated_policy_is_nearly_certain() {
        // always choosing arm 0 with non-negative rewards keeps V > 0
        let p = Participant {
            id: 0,
            episodes: vec![HumanEpisode {
                episode: 0,
                choices: vec![0; 10],
                rewards: vec![5.0; 10],
            }],
        };
        let obs = p.observations(&dist()).unwrap();
        let ll = observations_loglik(&obs[1..], &[1e3, 0.0, 0.0]).unwrap();
        assert!(ll > -1e-12 && ll < 0.0 || ll == 0.0);
    }

    #[test]
    fn log_mean_exp_identities() {
        assert_eq!(log_mean_exp(&[-3.5]), -3.5);
        assert!((log_mean_exp(&[-7.0, -7.0]) + 7.0).abs() < 1e-15);
        let l = -50.0;
        assert!((log_mean_exp(&[l, l - 1000.0]) - (l - 2f64.ln())).abs() < 1e-9);
        assert!(log_mean_exp(&[-1.0, -2.0, -3.0]) <= -1.0);
    }

    #[test]
    fn single_member_marginal_is_the_loglik() {
        let p = synthetic_participant([1.0, 0.0, 0.0], &dist(), 5, 2, 0).unwrap();
        let obs = p.observations(&dist()).unwrap();
        let h = Hypothesis::lrla(Some(256), vec![0], vec![[0.5, 0.2, 0.3]]).unwrap();
        assert_eq!(
            marginal_loglik(&obs, &h).unwrap(),
            observations_loglik(&obs, &[0.5, 0.2, 0.3]).unwrap()
        );
    }

    #[test]
    fn identical_hypotheses_give_zero() {
        let p = synthetic_participant([0.0, 0.0, 1.0], &dist(), 20, 3, 0).unwrap();
        let obs = p.observations(&dist()).unwrap();
        let base = Hypothesis::baseline(BaselineKind::ValueDirected);
        let class = [Hypothesis::lrla(Some(256), vec![0], vec![[1.0, 0.0, 0.0]]).unwrap()];
        let bf = bayes_factor(&obs, &class, &base).unwrap();
        assert_eq!(bf.log_bf, 0.0);
        assert!(!bf.very_strong());
        assert_eq!(population_bf(&[obs.clone(), obs], &class, &base).unwrap(), 0.0);
    }

    #[test]
    fn population_bf_is_antisymmetric() {
        let d = dist();
        let obs: Vec<_> = (0..4)
            .map(|i| {
                synthetic_participant([0.0, 0.0, 1.0], &d, 20, i, 1)
                    .unwrap()
                    .observations(&d)
                    .unwrap()
            })
            .collect();
        let a = Hypothesis::baseline(BaselineKind::Thompson);
        let b = Hypothesis::baseline(BaselineKind::Ucb);
        let ab = population_bf(&obs, std::slice::from_ref(&a), &b).unwrap();
        let ba = population_bf(&obs, std::slice::from_ref(&b), &a).unwrap();
        assert!((ab + ba).abs() < 1e-9);
        assert!(ab > 0.0);
    }

    #[test]
    fn recovers_generator_hypothesis() {
        let d = dist();
        let hyps: Vec<Hypothesis> = BaselineKind::ALL.iter().map(|&k| Hypothesis::baseline(k)).collect();
        let mut hits = 0;
        let mut total = 0;
        for (g, gen) in hyps.iter().enumerate() {
            for i in 0..20 {
                let p = synthetic_participant(gen.members[0], &d, 20, i, 7 + g as u64).unwrap();
                let obs = p.observations(&d).unwrap();
                let lls: Vec<f64> = hyps.iter().map(|h| marginal_loglik(&obs, h).unwrap()).collect();
                let best = lls.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                hits += (best == g) as usize;
                total += 1;
            }
        }
        assert!(hits as f64 >= 0.9 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn mixed_population_favors_the_class() {
        let d = dist();
        let th = Hypothesis::baseline(BaselineKind::Thompson);
        let vd = Hypothesis::baseline(BaselineKind::ValueDirected);
        let obs: Vec<_> = (0..20)
            .map(|i| {
                let w = if i % 2 == 0 { th.members[0] } else { vd.members[0] };
                synthetic_participant(w, &d, 20, i, 11)
                    .unwrap()
                    .observations(&d)
                    .unwrap()
            })
            .collect();
        let class = [th.clone(), vd.clone()];
        assert!(population_bf(&obs, &class, &th).unwrap() > 0.0);
        assert!(population_bf(&obs, &class, &vd).unwrap() > 0.0);
    }

    #[test]
    fn loads_well_formed_data() {
        let d = dist();
        let ps: Vec<_> = (0..3)
            .map(|i| synthetic_participant([0.0, 0.0, 1.0], &d, 4, i, 2).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_human_data(&mut buf, &ps).unwrap();
        let data = load_human_data(&buf[..], 10).unwrap();
        assert!(data.diagnostics.is_empty(), "{:?}", data.diagnostics);
        assert_eq!(data.participants.len(), 3);
        for (a, b) in data.participants.iter().zip(&ps) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.episodes.len(), 4);
            assert_eq!(a.episodes[0].choices, b.episodes[0].choices);
        }
    }

    #[test]
    fn empty_file_is_empty_set() {
        let data = load_human_data(&b""[..], 10).unwrap();
        assert!(data.participants.is_empty() && data.diagnostics.is_empty());
        let header_only = load_human_data(&b"participant_id,episode,trial,choice,reward\n"[..], 10).unwrap();
        assert!(header_only.participants.is_empty());
    }

    #[test]
    fn bad_rows_are_reported_with_lines() {
        let mut text = String::from("participant_id,episode,trial,choice,reward,mu0,mu1\n");
        for t in 0..10 {
            text.push_str(&format!("1,0,{t},{},1.5,0,0\n", t % 2));
        }
        text.push_str("2,0,0,3,1.0,0,0\n");
        text.push_str("2,0,1,0,,0,0\n");
        let data = load_human_data(text.as_bytes(), 10).unwrap();
        assert_eq!(data.participants.len(), 1);
        assert_eq!(data.diagnostics[0].line, 12);
        assert!(data.diagnostics[0].reason.contains("choice 3"));
        assert_eq!(data.diagnostics[1].line, 13);
        assert!(data.diagnostics[1].reason.contains("missing reward"));
    }

    #[test]
    fn short_episodes_are_rejected() {
        let mut text = String::from("participant_id,episode,trial,choice,reward\n");
        for t in 0..9 {
            text.push_str(&format!("5,0,{t},0,1.0\n"));
        }
        let data = load_human_data(text.as_bytes(), 10).unwrap();
        assert!(data.participants.is_empty());
        assert_eq!(data.diagnostics.len(), 1);
        assert_eq!(data.diagnostics[0].line, 0);
    }

    #[test]
    fn missing_column_is_an_error() {
        assert!(load_human_data(&b"participant_id,episode,trial,choice\n1,0,0,0\n"[..], 10).is_err());
    }
}
