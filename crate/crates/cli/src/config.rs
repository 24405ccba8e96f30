//! Experiment configuration. Every field has a default, so an empty file is
//! a valid configuration.

use anyhow::{bail, Context, Result};
use lrla::bandit::TaskDistribution;
use lrla::trainer::{EvalMode, TrainConfig};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub ridge: f64,
    /// mean-shift bandwidth; Silverman's rule when absent
    pub bandwidth: Option<f64>,
    /// episodes simulated per model to fit its probit surrogate
    pub sim_episodes: u64,
    pub eval_episodes: u64,
    pub eval_mode: EvalMode,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            ridge: 0.01,
            bandwidth: None,
            sim_episodes: 1000,
            eval_episodes: 1000,
            eval_mode: EvalMode::PosteriorSample,
        }
    }
}

/// `N̂` grid value; `None` is the unconstrained model, written `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Nhat(pub Option<u32>);

impl Nhat {
    pub fn label(self) -> String {
        lrla::comparison::nhat_label(self.0)
    }
}

impl Serialize for Nhat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(n) => s.serialize_u32(n),
            None => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Nhat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) if n > 0 && n <= u32::MAX as i64 => Ok(Nhat(Some(n as u32))),
            Raw::Int(n) => Err(serde::de::Error::custom(format!("nhat must be positive, got {n}"))),
            Raw::Str(s) if s == "inf" => Ok(Nhat(None)),
            Raw::Str(s) => s
                .parse::<u32>()
                .map(|n| Nhat(Some(n)))
                .map_err(|_| serde::de::Error::custom(format!("bad nhat {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub nhat: Vec<Nhat>,
    pub seeds: Vec<u64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            nhat: [256, 512, 1024, 2048, 4096, 8192]
                .into_iter()
                .map(|n| Nhat(Some(n)))
                .collect(),
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// base seed: offsets the training seeds of the grid and seeds every
    /// simulation and evaluation
    pub seed: u64,
    pub task: TaskDistribution,
    /// the `nhat` and `seed` fields are set per grid cell
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub grids: GridConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: TaskDistribution::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            grids: GridConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        if self.grids.nhat.is_empty() || self.grids.seeds.is_empty() {
            bail!("grids.nhat and grids.seeds must be non-empty");
        }
        if !(self.analysis.ridge >= 0.0) {
            bail!("analysis.ridge must be non-negative");
        }
        if let Some(b) = self.analysis.bandwidth {
            if !(b > 0.0) {
                bail!("analysis.bandwidth must be positive");
            }
        }
        if self.analysis.sim_episodes == 0 || self.analysis.eval_episodes == 0 {
            bail!("analysis episode counts must be positive");
        }
        Ok(())
    }

    /// Training configuration of one grid cell.
    pub fn cell(&self, nhat: Nhat, grid_seed: u64) -> TrainConfig {
        TrainConfig {
            nhat: nhat.0,
            seed: self.seed.wrapping_add(grid_seed),
            ..self.train.clone()
        }
    }
}
