//! Checkpoint container and diagnostics CSV.
//!
//! Layout: the 8-byte magic `LRLACKPT`, a little-endian `u64` manifest
//! length, the JSON manifest, then every array as little-endian `f64`
//! values in manifest order.

use crate::bandit::TaskDistribution;
use crate::error::{Error, Result};
use crate::net::{NetParams, NetShape};
use crate::trainer::{evaluate, Adam, DiagnosticRow, EvalMode, Evaluation, TrainConfig, TrainState};
use crate::varbayes::{HorseshoePrior, VariationalPosterior};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"LRLACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// offset in values from the start of the array section
    pub offset: usize,
}

impl ArrayEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: TrainConfig,
    pub task: TaskDistribution,
    pub shape: NetShape,
    pub prior: HorseshoePrior,
    pub episode: u64,
    pub adam_steps: u64,
    pub window_count: u64,
    pub num_groups: usize,
    /// group id of every network weight
    pub groups: Vec<u32>,
    pub arrays: Vec<ArrayEntry>,
}

/// A trained model with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub task: TaskDistribution,
    pub state: TrainState,
}

const ARRAY_NAMES: [&str; 10] = [
    "weight_loc",
    "weight_log_scale",
    "group_loc",
    "group_log_scale",
    "global",
    "target_params",
    "adam_m",
    "adam_v",
    "window",
    "diagnostics",
];

impl Checkpoint {
    pub fn new(config: TrainConfig, task: TaskDistribution, state: TrainState) -> Self {
        Self { config, task, state }
    }

    pub fn nhat(&self) -> Option<u32> {
        self.config.nhat
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn posterior(&self) -> &VariationalPosterior {
        &self.state.posterior
    }

    pub fn evaluate(&self, episodes: u64, mode: EvalMode, seed: u64, source_tag: &str) -> Result<Evaluation> {
        evaluate(
            &self.state.posterior,
            self.state.shape,
            self.config.reward_scale,
            &self.task,
            episodes,
            mode,
            seed,
            source_tag,
        )
    }

    fn arrays(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        let q = &self.state.posterior;
        let s = &self.state;
        let diag: Vec<f64> = s
            .diagnostics
            .iter()
            .flat_map(|d| [d.episode as f64, d.loss, d.kl, d.mean_regret_window])
            .collect();
        vec![
            (vec![q.num_weights()], q.weight_loc().to_vec()),
            (vec![q.num_weights()], q.weight_log_scale().to_vec()),
            (vec![q.num_groups], q.group_loc().to_vec()),
            (vec![q.num_groups], q.group_log_scale().to_vec()),
            (vec![2], vec![q.global_loc(), q.global_log_scale()]),
            (vec![s.target_params.data.len()], s.target_params.data.clone()),
            (vec![s.optimizer.m.len()], s.optimizer.m.clone()),
            (vec![s.optimizer.v.len()], s.optimizer.v.clone()),
            (vec![3], vec![s.window.0, s.window.1, s.window.2]),
            (vec![s.diagnostics.len(), 4], diag),
        ]
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let arrays = ARRAY_NAMES
            .iter()
            .zip(self.arrays())
            .map(|(name, (shape, _))| {
                let e = ArrayEntry {
                    name: name.to_string(),
                    shape,
                    offset,
                };
                offset += e.len();
                e
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            task: self.task.clone(),
            shape: self.state.shape,
            prior: self.state.prior,
            episode: self.state.episode,
            adam_steps: self.state.optimizer.t,
            window_count: self.state.window.3,
            num_groups: self.state.posterior.num_groups,
            groups: self.state.posterior.groups.clone(),
            arrays,
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        out.write_all(MAGIC)?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(&manifest)?;
        for (_, values) in self.arrays() {
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut manifest = vec![0u8; len];
        input.read_exact(&mut manifest)?;
        let m: Manifest = serde_json::from_slice(&manifest)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                m.format_version
            )));
        }
        let names: Vec<&str> = m.arrays.iter().map(|a| a.name.as_str()).collect();
        if names != ARRAY_NAMES {
            return Err(Error::Checkpoint(format!("unexpected arrays {names:?}")));
        }
        let mut arrays = Vec::with_capacity(m.arrays.len());
        let mut offset = 0;
        for entry in &m.arrays {
            if entry.offset != offset {
                return Err(Error::Checkpoint(format!(
                    "array {} at offset {}, expected {offset}",
                    entry.name, entry.offset
                )));
            }
            let mut bytes = vec![0u8; entry.len() * 8];
            input.read_exact(&mut bytes)?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            offset += values.len();
            arrays.push(values);
        }
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Self::from_parts(m, arrays)
    }

    fn from_parts(m: Manifest, arrays: Vec<Vec<f64>>) -> Result<Self> {
        m.shape.validate()?;
        if m.groups != m.shape.groups() {
            return Err(Error::Checkpoint(
                "grouping map does not match the network shape".into(),
            ));
        }
        let [wl, ws, gl, gs, global, target, am, av, window, diag]: [Vec<f64>; 10] = arrays
            .try_into()
            .map_err(|_| Error::Checkpoint("wrong array count".into()))?;
        if global.len() != 2 || window.len() != 3 || diag.len() % 4 != 0 {
            return Err(Error::Checkpoint("malformed scalar arrays".into()));
        }
        let mut phi = Vec::with_capacity(wl.len() * 2 + gl.len() * 2 + 2);
        phi.extend_from_slice(&wl);
        phi.extend_from_slice(&ws);
        phi.extend_from_slice(&gl);
        phi.extend_from_slice(&gs);
        phi.extend_from_slice(&global);
        let posterior = VariationalPosterior::new(m.groups, phi)?;
        if posterior.num_groups != m.num_groups || posterior.num_weights() != m.shape.num_params() {
            return Err(Error::Checkpoint("posterior does not match the network shape".into()));
        }
        if am.len() != posterior.num_phi() || av.len() != posterior.num_phi() {
            return Err(Error::Checkpoint("optimizer moments have the wrong length".into()));
        }
        let target_params = NetParams::from_vec(m.shape, target)?;
        let diagnostics = diag
            .chunks_exact(4)
            .map(|r| DiagnosticRow {
                episode: r[0] as u64,
                loss: r[1],
                kl: r[2],
                mean_regret_window: r[3],
            })
            .collect();
        let mut state = TrainState::from_posterior(m.shape, m.prior, posterior);
        state.target_params = target_params;
        state.optimizer = Adam {
            m: am,
            v: av,
            t: m.adam_steps,
        };
        state.episode = m.episode;
        state.diagnostics = diagnostics;
        state.window = (window[0], window[1], window[2], m.window_count);
        Ok(Self {
            config: m.config,
            task: m.task,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

pub const DIAGNOSTICS_HEADER: [&str; 4] = ["episode", "loss", "kl", "mean_regret_window"];

pub fn write_diagnostics<W: Write>(out: W, rows: &[DiagnosticRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(DIAGNOSTICS_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_diagnostics<R: Read>(input: R) -> Result<Vec<DiagnosticRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != DIAGNOSTICS_HEADER {
        return Err(Error::Malformed {
            line: 1,
            reason: format!("diagnostics header {header:?}"),
        });
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
