//! Subcommand implementations. Each writes its outputs atomically into the
//! configured output directory and finishes with a run manifest.

use crate::config::{ExperimentConfig, Nhat};
use crate::output::{csv_bytes, OutputSet, RunManifest, RunRecord};
use anyhow::{anyhow, bail, Context, Result};
use lrla::bandit::{read_trajectories, write_trajectories, Trajectory};
use lrla::belief::{simulate_probit, BaselineKind};
use lrla::checkpoint::{write_diagnostics, Checkpoint};
use lrla::comparison::{
    bayes_factor, hypothesis_from_model, load_human_data, marginal_loglik, nhat_label, population_bf, BayesFactorRow,
    Hypothesis, LoglikRow, RowDiagnostic,
};
use lrla::strategy::{
    fit_probit, mean_shift, prototype_of, silverman_bandwidth, trajectory_observations, CoefficientRow, ProbitFit,
};
use lrla::trainer::{train, EvalMode};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "LRLA_WORKERS";

/// A command-line usage problem, reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{WORKERS_ENV}={v:?} is not a count"))?;
            if n == 0 {
                bail!("{WORKERS_ENV} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers()?).build()?)
}

pub fn cell_name(nhat: Nhat, seed: u64) -> String {
    format!("nhat-{}_seed-{seed}", nhat.label())
}

/// Source tag of trajectories produced by a trained model.
pub fn lrla_tag(nhat: Option<u32>, seed: u64) -> String {
    format!("lrla-{}-s{seed}", nhat_label(nhat))
}

pub fn parse_lrla_tag(tag: &str) -> Option<(Option<u32>, u64)> {
    let rest = tag.strip_prefix("lrla-")?;
    let (n, s) = rest.rsplit_once("-s")?;
    let nhat = if n == "inf" { None } else { Some(n.parse().ok()?) };
    Some((nhat, s.parse().ok()?))
}

fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading checkpoint directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .ckpt files in {}", dir.display());
    }
    Ok(files)
}

pub fn load_checkpoints(dir: &Path) -> Result<Vec<(PathBuf, Checkpoint)>> {
    checkpoint_files(dir)?
        .into_iter()
        .map(|p| {
            let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
            Ok((p, ck))
        })
        .collect()
}

fn trajectory_bytes(trajs: &[Trajectory], reward_noise_sd: f64) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_trajectories(&mut bytes, trajs)?;
    let back = read_trajectories(&bytes[..], reward_noise_sd)?;
    let rows: usize = trajs.iter().map(|t| t.steps.len()).sum();
    let back_rows: usize = back.iter().map(|t| t.steps.len()).sum();
    if back_rows != rows {
        bail!("trajectory csv has {back_rows} rows, expected {rows}");
    }
    Ok(bytes)
}

/// Trains every `(nhat, seed)` cell of the grid. Failed cells are recorded
/// in the manifest; the remaining cells still run.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let cells: Vec<(Nhat, u64)> = cfg
        .grids
        .nhat
        .iter()
        .flat_map(|&n| cfg.grids.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let results: Vec<Result<(Vec<u8>, Vec<u8>)>> = pool()?.install(|| {
        cells
            .par_iter()
            .map(|&(nhat, grid_seed)| {
                let tc = cfg.cell(nhat, grid_seed);
                let state = train(&tc, &cfg.task)?;
                let mut diag = Vec::new();
                write_diagnostics(&mut diag, &state.diagnostics)?;
                let ckpt = Checkpoint::new(tc, cfg.task.clone(), state);
                Ok((ckpt.to_bytes(), diag))
            })
            .collect()
    });
    let mut out = OutputSet::new(&cfg.output.dir)?;
    let mut runs = Vec::new();
    for (&(nhat, grid_seed), result) in cells.iter().zip(results) {
        let name = cell_name(nhat, grid_seed);
        let seed = cfg.cell(nhat, grid_seed).seed;
        match result {
            Ok((ckpt, diag)) => {
                out.write(&format!("checkpoints/{name}.ckpt"), &ckpt)?;
                out.write(&format!("diagnostics/{name}.csv"), &diag)?;
                runs.push(RunRecord {
                    name,
                    seed,
                    error: None,
                });
            }
            Err(e) => runs.push(RunRecord {
                name,
                seed,
                error: Some(format!("{e:#}")),
            }),
        }
    }
    out.finish("train", cfg, json!({ "cells": cells.len() }), runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyChoice {
    Baseline(BaselineKind),
    Lrla,
}

impl std::str::FromStr for PolicyChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "lrla" {
            return Ok(Self::Lrla);
        }
        s.parse::<BaselineKind>().map(Self::Baseline).map_err(|e| e.to_string())
    }
}

/// Simulates `episodes` episodes of one policy on the configured task.
pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    policy: PolicyChoice,
    ckpt: Option<&Path>,
    episodes: u64,
    mode: Option<EvalMode>,
) -> Result<RunManifest> {
    cfg.validate()?;
    let (tag, trajs) = match policy {
        PolicyChoice::Baseline(kind) => {
            if ckpt.is_some() {
                return Err(UsageError("--ckpt only applies to --policy lrla".into()).into());
            }
            (
                kind.name().to_string(),
                simulate_probit(kind.coefficients(), &cfg.task, episodes, cfg.seed, kind.name())?,
            )
        }
        PolicyChoice::Lrla => {
            let path = ckpt.ok_or_else(|| UsageError("--policy lrla requires --ckpt".into()))?;
            let mut model = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            model.task = cfg.task.clone();
            let tag = lrla_tag(model.nhat(), model.seed());
            let mode = mode.unwrap_or(cfg.analysis.eval_mode);
            let eval = model.evaluate(episodes, mode, cfg.seed, &tag)?;
            (tag, eval.trajectories)
        }
    };
    let regret = trajs.iter().map(lrla::bandit::episode_regret).sum::<f64>() / trajs.len().max(1) as f64;
    let mut out = OutputSet::new(&cfg.output.dir)?;
    out.write(
        &format!("trajectories_{tag}.csv"),
        &trajectory_bytes(&trajs, cfg.task.reward_noise_sd)?,
    )?;
    out.finish(
        "simulate",
        cfg,
        json!({ "policy": tag, "episodes": episodes, "mode": mode, "mean_regret": regret }),
        vec![RunRecord {
            name: tag,
            seed: cfg.seed,
            error: None,
        }],
    )
}

pub const COEFFICIENT_HEADER: [&str; 13] = [
    "entity_id",
    "kind",
    "nhat",
    "seed",
    "w1",
    "w2",
    "w3",
    "sd1",
    "sd2",
    "sd3",
    "loglik",
    "n_obs",
    "status",
];

fn failed_row(
    entity_id: &str,
    kind: &str,
    nhat: Option<u32>,
    seed: Option<u64>,
    n_obs: usize,
    err: &str,
) -> CoefficientRow {
    CoefficientRow {
        entity_id: entity_id.to_string(),
        kind: kind.to_string(),
        nhat,
        seed,
        w1: f64::NAN,
        w2: f64::NAN,
        w3: f64::NAN,
        sd1: f64::NAN,
        sd2: f64::NAN,
        sd3: f64::NAN,
        loglik: f64::NAN,
        n_obs,
        status: format!("failed: {err}"),
    }
}

fn coefficient_row(
    entity_id: &str,
    kind: &str,
    nhat: Option<u32>,
    seed: Option<u64>,
    n_obs: usize,
    fit: lrla::Result<ProbitFit>,
) -> CoefficientRow {
    match fit {
        Ok(f) => CoefficientRow::from_fit(entity_id, kind, nhat, seed, &f),
        Err(e) => failed_row(entity_id, kind, nhat, seed, n_obs, &e.to_string()),
    }
}

pub const DIAGNOSTIC_HEADER: [&str; 2] = ["line", "reason"];

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DiagnosticCsvRow {
    line: u64,
    reason: String,
}

fn diagnostic_rows(d: &[RowDiagnostic]) -> Vec<DiagnosticCsvRow> {
    d.iter()
        .map(|d| DiagnosticCsvRow {
            line: d.line,
            reason: d.reason.clone(),
        })
        .collect()
}

pub enum FitInput<'a> {
    Trajectories(&'a Path),
    Human(&'a Path),
}

/// Fits one probit model per entity: per source tag for trajectory files,
/// per participant for human data.
pub fn cmd_fit_probit(cfg: &ExperimentConfig, input: FitInput<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let ridge = cfg.analysis.ridge;
    let dist = &cfg.task;
    let mut out = OutputSet::new(&cfg.output.dir)?;
    let (rows, diagnostics, source) = match input {
        FitInput::Trajectories(path) => {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let trajs = read_trajectories(std::io::BufReader::new(file), dist.reward_noise_sd)?;
            let mut by_tag: BTreeMap<String, Vec<&Trajectory>> = BTreeMap::new();
            for t in &trajs {
                by_tag.entry(t.source_tag.clone()).or_default().push(t);
            }
            let entities: Vec<(String, Vec<&Trajectory>)> = by_tag.into_iter().collect();
            let rows: Vec<CoefficientRow> = pool()?.install(|| {
                entities
                    .par_iter()
                    .map(|(tag, ts)| {
                        let (kind, nhat, seed) = match (tag.parse::<BaselineKind>(), parse_lrla_tag(tag)) {
                            (Ok(_), _) => ("baseline", None, None),
                            (_, Some((n, s))) => ("lrla", n, Some(s)),
                            _ => ("lrla", None, None),
                        };
                        let obs: lrla::Result<Vec<_>> = ts
                            .iter()
                            .map(|t| trajectory_observations(t, dist))
                            .collect::<lrla::Result<Vec<_>>>()
                            .map(|v| v.concat());
                        match obs {
                            Ok(obs) => coefficient_row(tag, kind, nhat, seed, obs.len(), fit_probit(&obs, ridge)),
                            Err(e) => failed_row(tag, kind, nhat, seed, 0, &e.to_string()),
                        }
                    })
                    .collect()
            });
            (rows, Vec::new(), path)
        }
        FitInput::Human(path) => {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let data = load_human_data(std::io::BufReader::new(file), dist.horizon)?;
            let rows: Vec<CoefficientRow> = pool()?.install(|| {
                data.participants
                    .par_iter()
                    .map(|p| {
                        let id = p.id.to_string();
                        match p.observations(dist) {
                            Ok(obs) => coefficient_row(&id, "human", None, None, obs.len(), fit_probit(&obs, ridge)),
                            Err(e) => failed_row(&id, "human", None, None, 0, &e.to_string()),
                        }
                    })
                    .collect()
            });
            (rows, data.diagnostics, path)
        }
    };
    for d in &diagnostics {
        eprintln!("warning: line {}: {}", d.line, d.reason);
    }
    let failures = rows.iter().filter(|r| r.status.starts_with("failed")).count();
    for r in rows.iter().filter(|r| r.status.starts_with("failed")) {
        eprintln!("warning: entity {}: {}", r.entity_id, r.status);
    }
    out.write_csv("coefficients.csv", &COEFFICIENT_HEADER, &rows)?;
    out.write_csv(
        "input_diagnostics.csv",
        &DIAGNOSTIC_HEADER,
        &diagnostic_rows(&diagnostics),
    )?;
    out.finish(
        "fit-probit",
        cfg,
        json!({
            "input": source.display().to_string(),
            "entities": rows.len(),
            "failed_fits": failures,
            "rejected_inputs": diagnostics.len(),
        }),
        Vec::new(),
    )
}

pub const LOGLIK_HEADER: [&str; 3] = ["participant_id", "hypothesis", "loglik"];
pub const BF_HEADER: [&str; 5] = ["participant_id", "log_bf", "two_log_bf", "best_nhat", "very_strong"];
pub const POPULATION_HEADER: [&str; 3] = ["baseline", "two_log_bf", "very_strong"];
pub const BEST_NHAT_HEADER: [&str; 2] = ["nhat", "participants"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationRow {
    pub baseline: String,
    pub two_log_bf: f64,
    pub very_strong: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BestNhatRow {
    pub nhat: String,
    pub participants: usize,
}

/// Probit surrogates for every checkpoint, grouped into one hypothesis per
/// `nhat` (sorted, unconstrained last). Failed models are returned as run
/// records.
pub fn model_hypotheses(
    cfg: &ExperimentConfig,
    ckpts: &[(PathBuf, Checkpoint)],
) -> Result<(Vec<Hypothesis>, Vec<CoefficientRow>, Vec<RunRecord>)> {
    let fits: Vec<lrla::Result<ProbitFit>> = pool()?.install(|| {
        ckpts
            .par_iter()
            .map(|(_, ck)| {
                hypothesis_from_model(ck, &cfg.task, cfg.analysis.sim_episodes, cfg.analysis.ridge, cfg.seed)
            })
            .collect()
    });
    let mut groups: BTreeMap<Nhat, (Vec<u64>, Vec<[f64; 3]>)> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for ((path, ck), fit) in ckpts.iter().zip(fits) {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tag = lrla_tag(ck.nhat(), ck.seed());
        let n_obs = (cfg.analysis.sim_episodes as usize) * cfg.task.horizon;
        match fit {
            Ok(f) => {
                rows.push(CoefficientRow::from_fit(&tag, "lrla", ck.nhat(), Some(ck.seed()), &f));
                let g = groups.entry(Nhat(ck.nhat())).or_default();
                g.0.push(ck.seed());
                g.1.push(f.w);
                runs.push(RunRecord {
                    name,
                    seed: ck.seed(),
                    error: None,
                });
            }
            Err(e) => {
                rows.push(failed_row(
                    &tag,
                    "lrla",
                    ck.nhat(),
                    Some(ck.seed()),
                    n_obs,
                    &e.to_string(),
                ));
                runs.push(RunRecord {
                    name,
                    seed: ck.seed(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    // finite nhat ascending, then the unconstrained model
    let mut ordered: Vec<(Nhat, (Vec<u64>, Vec<[f64; 3]>))> = groups.into_iter().collect();
    ordered.sort_by_key(|(n, _)| (n.0.is_none(), n.0));
    let hyps = ordered
        .into_iter()
        .map(|(n, (seeds, members))| Ok(Hypothesis::lrla(n.0, seeds, members)?))
        .collect::<Result<Vec<_>>>()?;
    Ok((hyps, rows, runs))
}

/// Scores human data against the trained models and the fixed strategies.
///
/// The model class holds every finite `nhat`; an unconstrained model, if
/// present, is scored but kept out of the class.
pub fn cmd_compare(cfg: &ExperimentConfig, human: &Path, ckpt_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let ckpts = load_checkpoints(ckpt_dir)?;
    let (hyps, model_rows, runs) = model_hypotheses(cfg, &ckpts)?;
    let class: Vec<Hypothesis> = hyps.iter().filter(|h| h.nhat().flatten().is_some()).cloned().collect();
    if class.is_empty() {
        bail!("no finite-nhat model produced a usable hypothesis");
    }
    let baselines: Vec<Hypothesis> = BaselineKind::ALL.iter().map(|&k| Hypothesis::baseline(k)).collect();
    let value = &baselines[0];

    let file = std::fs::File::open(human).with_context(|| format!("opening {}", human.display()))?;
    let data = load_human_data(std::io::BufReader::new(file), cfg.task.horizon)?;
    for d in &data.diagnostics {
        eprintln!("warning: line {}: {}", d.line, d.reason);
    }
    let observations: Vec<Vec<_>> = data
        .participants
        .iter()
        .map(|p| p.observations(&cfg.task))
        .collect::<lrla::Result<_>>()?;

    let scored: Vec<Result<(Vec<LoglikRow>, BayesFactorRow, usize)>> = pool()?.install(|| {
        data.participants
            .par_iter()
            .zip(&observations)
            .map(|(p, obs)| {
                let mut ll = Vec::new();
                for h in hyps.iter().chain(&baselines) {
                    ll.push(LoglikRow {
                        participant_id: p.id,
                        hypothesis: h.label.clone(),
                        loglik: marginal_loglik(obs, h)?,
                    });
                }
                let bf = bayes_factor(obs, &class, value)?;
                let best_nhat = nhat_label(class[bf.best].nhat().flatten());
                let row = BayesFactorRow {
                    participant_id: p.id,
                    log_bf: bf.log_bf,
                    two_log_bf: bf.two_log_bf,
                    best_nhat,
                    very_strong: bf.very_strong(),
                };
                Ok((ll, row, bf.best))
            })
            .collect()
    });
    let mut loglik_rows = Vec::new();
    let mut bf_rows = Vec::new();
    let mut best_counts = vec![0usize; class.len()];
    for (p, s) in data.participants.iter().zip(scored) {
        let (ll, bf, best) = s.with_context(|| format!("scoring participant {}", p.id))?;
        loglik_rows.extend(ll);
        bf_rows.push(bf);
        best_counts[best] += 1;
    }
    let population = baselines
        .iter()
        .map(|b| {
            let v = population_bf(&observations, &class, b)?;
            Ok(PopulationRow {
                baseline: b.label.clone(),
                two_log_bf: v,
                very_strong: v > lrla::comparison::VERY_STRONG,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best_rows: Vec<BestNhatRow> = class
        .iter()
        .zip(&best_counts)
        .map(|(h, &c)| BestNhatRow {
            nhat: nhat_label(h.nhat().flatten()),
            participants: c,
        })
        .collect();

    let mut out = OutputSet::new(&cfg.output.dir)?;
    out.write_csv("compare_models.csv", &COEFFICIENT_HEADER, &model_rows)?;
    out.write_csv("compare_loglik.csv", &LOGLIK_HEADER, &loglik_rows)?;
    out.write_csv("compare_bf.csv", &BF_HEADER, &bf_rows)?;
    out.write_csv("compare_population.csv", &POPULATION_HEADER, &population)?;
    out.write_csv("compare_best_nhat.csv", &BEST_NHAT_HEADER, &best_rows)?;
    out.write_csv(
        "input_diagnostics.csv",
        &DIAGNOSTIC_HEADER,
        &diagnostic_rows(&data.diagnostics),
    )?;
    let strong = bf_rows.iter().filter(|r| r.very_strong).count();
    out.finish(
        "compare",
        cfg,
        json!({
            "human": human.display().to_string(),
            "ckpt_dir": ckpt_dir.display().to_string(),
            "participants": bf_rows.len(),
            "very_strong_vs_value": strong,
            "class": class.iter().map(|h| h.label.clone()).collect::<Vec<_>>(),
        }),
        runs,
    )
}

pub const CLUSTER_HEADER: [&str; 7] = ["entity_id", "kind", "cluster", "w1", "w2", "w3", "prototype"];
pub const MODE_HEADER: [&str; 7] = ["cluster", "m1", "m2", "m3", "size", "prototype_entity", "bandwidth"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterRow {
    pub entity_id: String,
    pub kind: String,
    pub cluster: usize,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub prototype: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeRow {
    pub cluster: usize,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub size: usize,
    pub prototype_entity: String,
    pub bandwidth: f64,
}

pub fn read_coefficients(path: &Path) -> Result<Vec<CoefficientRow>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COEFFICIENT_HEADER {
        bail!("{} is not a coefficient file (header {header:?})", path.display());
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{} line {}", path.display(), i + 2)))
        .collect()
}

/// Mean-shift clustering of fitted coefficient vectors. Rows whose fit
/// failed are skipped.
pub fn cmd_cluster(cfg: &ExperimentConfig, coeffs: &Path, bandwidth: Option<f64>) -> Result<RunManifest> {
    cfg.validate()?;
    let rows: Vec<CoefficientRow> = read_coefficients(coeffs)?
        .into_iter()
        .filter(|r| r.w().iter().all(|v| v.is_finite()))
        .collect();
    if rows.is_empty() {
        bail!("{} has no usable coefficient rows", coeffs.display());
    }
    let points: Vec<[f64; 3]> = rows.iter().map(CoefficientRow::w).collect();
    let (bw, rule) = match bandwidth.or(cfg.analysis.bandwidth) {
        Some(b) if b > 0.0 => (b, "override"),
        Some(b) => bail!("bandwidth must be positive, got {b}"),
        None => (silverman_bandwidth(&points), "silverman"),
    };
    let clusters = mean_shift(&points, bw)?;
    let fits: Vec<ProbitFit> = rows
        .iter()
        .map(|r| ProbitFit {
            w: r.w(),
            covariance: [[f64::NAN; 3]; 3],
            log_likelihood: r.loglik,
            n_obs: r.n_obs,
            ridge: cfg.analysis.ridge,
            iterations: 0,
            status: lrla::strategy::FitStatus::Converged,
        })
        .collect();
    let mut modes = Vec::new();
    let mut prototypes = vec![false; rows.len()];
    for (c, m) in clusters.modes.iter().enumerate() {
        let proto = prototype_of(&clusters, &fits, c)?;
        prototypes[proto] = true;
        modes.push(ModeRow {
            cluster: c,
            m1: m[0],
            m2: m[1],
            m3: m[2],
            size: clusters.members(c).count(),
            prototype_entity: rows[proto].entity_id.clone(),
            bandwidth: bw,
        });
    }
    let cluster_rows: Vec<ClusterRow> = rows
        .iter()
        .zip(&clusters.assignments)
        .zip(&prototypes)
        .map(|((r, &c), &p)| ClusterRow {
            entity_id: r.entity_id.clone(),
            kind: r.kind.clone(),
            cluster: c,
            w1: r.w1,
            w2: r.w2,
            w3: r.w3,
            prototype: p,
        })
        .collect();
    let mut out = OutputSet::new(&cfg.output.dir)?;
    out.write_csv("clusters.csv", &CLUSTER_HEADER, &cluster_rows)?;
    out.write_csv("cluster_modes.csv", &MODE_HEADER, &modes)?;
    out.finish(
        "cluster",
        cfg,
        json!({
            "coeffs": coeffs.display().to_string(),
            "bandwidth": bw,
            "bandwidth_rule": rule,
            "clusters": modes.len(),
            "points": rows.len(),
        }),
        Vec::new(),
    )
}

pub const REGRET_HEADER: [&str; 7] = [
    "kind",
    "nhat",
    "seed",
    "mean_regret",
    "regret_sd",
    "episodes",
    "non_increasing",
];

/// One line of the regret summary. `kind` is `model` for a single
/// checkpoint, `nhat-mean` for the seed average of one `nhat`, and
/// `reference` for baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretRow {
    pub kind: String,
    pub nhat: String,
    pub seed: Option<u64>,
    pub mean_regret: f64,
    pub regret_sd: f64,
    pub episodes: u64,
    /// for `nhat-mean` rows: not above the next smaller finite `nhat`
    pub non_increasing: Option<bool>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Mean evaluation regret of every checkpoint, seed averages per `nhat`,
/// and reference rows. All models face the same tasks.
pub fn cmd_regret(cfg: &ExperimentConfig, ckpt_dir: &Path, episodes: Option<u64>) -> Result<RunManifest> {
    cfg.validate()?;
    let episodes = episodes.unwrap_or(cfg.analysis.eval_episodes);
    if episodes == 0 {
        return Err(UsageError("--episodes must be positive".into()).into());
    }
    let ckpts = load_checkpoints(ckpt_dir)?;
    let mode = cfg.analysis.eval_mode;
    let evals: Vec<lrla::Result<(f64, f64)>> = pool()?.install(|| {
        ckpts
            .par_iter()
            .map(|(_, ck)| {
                let mut model = ck.clone();
                model.task = cfg.task.clone();
                let e = model.evaluate(episodes, mode, cfg.seed, "regret")?;
                Ok((e.mean_regret(), e.regret_sd()))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut by_nhat: BTreeMap<(bool, Option<u32>), Vec<f64>> = BTreeMap::new();
    for ((path, ck), e) in ckpts.iter().zip(evals) {
        let (m, sd) = e.with_context(|| format!("evaluating {}", path.display()))?;
        rows.push(RegretRow {
            kind: "model".into(),
            nhat: nhat_label(ck.nhat()),
            seed: Some(ck.seed()),
            mean_regret: m,
            regret_sd: sd,
            episodes,
            non_increasing: None,
        });
        by_nhat.entry((ck.nhat().is_none(), ck.nhat())).or_default().push(m);
    }
    let mut prev: Option<f64> = None;
    let mut monotone = true;
    for ((unconstrained, nhat), means) in &by_nhat {
        let (m, sd) = mean_sd(means);
        let flag = if *unconstrained {
            None
        } else {
            let ok = prev.is_none_or(|p| m <= p);
            monotone &= ok;
            prev = Some(m);
            Some(ok)
        };
        rows.push(RegretRow {
            kind: "nhat-mean".into(),
            nhat: nhat_label(*nhat),
            seed: None,
            mean_regret: m,
            regret_sd: sd,
            episodes,
            non_increasing: flag,
        });
    }
    let value = simulate_probit(
        BaselineKind::ValueDirected.coefficients(),
        &cfg.task,
        episodes,
        cfg.seed,
        "value",
    )?;
    let regrets: Vec<f64> = value.iter().map(lrla::bandit::episode_regret).collect();
    let (vm, vsd) = mean_sd(&regrets);
    rows.push(RegretRow {
        kind: "reference".into(),
        nhat: "value".into(),
        seed: None,
        mean_regret: vm,
        regret_sd: vsd,
        episodes,
        non_increasing: None,
    });
    if let Some(means) = by_nhat.get(&(true, None)) {
        let (m, sd) = mean_sd(means);
        rows.push(RegretRow {
            kind: "reference".into(),
            nhat: "unconstrained".into(),
            seed: None,
            mean_regret: m,
            regret_sd: sd,
            episodes,
            non_increasing: None,
        });
    }
    rows.push(RegretRow {
        kind: "reference".into(),
        nhat: "untrained".into(),
        seed: None,
        mean_regret: lrla::trainer::untrained_reference(&cfg.task),
        regret_sd: f64::NAN,
        episodes: 0,
        non_increasing: None,
    });
    let bytes = csv_bytes(&REGRET_HEADER, &rows)?;
    let mut out = OutputSet::new(&cfg.output.dir)?;
    out.write("regret.csv", &bytes)?;
    out.finish(
        "regret",
        cfg,
        json!({
            "ckpt_dir": ckpt_dir.display().to_string(),
            "episodes": episodes,
            "mode": mode,
            "non_increasing_in_nhat": monotone,
        }),
        Vec::new(),
    )
}

/// Reads a regret summary back.
pub fn read_regret(path: &Path) -> Result<Vec<RegretRow>> {
    let bytes = std::fs::read(path)?;
    let mut r = csv::Reader::from_reader(&bytes[..]);
    r.deserialize().map(|row| row.map_err(|e| anyhow!(e))).collect()
}
