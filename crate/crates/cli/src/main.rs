use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lrla::trainer::EvalMode;
use lrla_cli::{
    cmd_cluster, cmd_compare, cmd_fit_probit, cmd_regret, cmd_simulate, cmd_train, ExperimentConfig, FitInput,
    PolicyChoice, RunManifest, UsageError,
};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lrla", version, about = "Resource-constrained learned bandit algorithms")]
struct Cli {
    /// TOML configuration; defaults apply to anything it leaves out
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the configured base seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// overrides the configured output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Map,
    PosteriorSample,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (nhat, seed) cell of the configured grid
    Train,
    /// Simulate episodes of a baseline strategy or a trained model
    Simulate {
        /// value, thompson, ucb or lrla
        #[arg(long)]
        policy: PolicyChoice,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        episodes: u64,
        /// how a trained model draws its weights
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Fit probit coefficients per entity
    FitProbit(FitArgs),
    /// Score human data against trained models and fixed strategies
    Compare {
        #[arg(long)]
        human: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
    },
    /// Mean-shift clustering of a coefficient file
    Cluster {
        #[arg(long)]
        coeffs: PathBuf,
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Evaluation regret of trained models
    Regret {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        episodes: Option<u64>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FitArgs {
    /// trajectory CSV; one fit per source tag
    #[arg(long)]
    traj: Option<PathBuf>,
    /// human-choice CSV; one fit per participant
    #[arg(long)]
    human: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<RunManifest> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output.dir = o;
    }
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Simulate {
            policy,
            ckpt,
            episodes,
            mode,
        } => {
            let mode = mode.map(|m| match m {
                Mode::Map => EvalMode::Map,
                Mode::PosteriorSample => EvalMode::PosteriorSample,
            });
            cmd_simulate(&cfg, policy, ckpt.as_deref(), episodes, mode)
        }
        Command::FitProbit(FitArgs { traj, human }) => match (traj, human) {
            (Some(t), _) => cmd_fit_probit(&cfg, FitInput::Trajectories(&t)),
            (_, Some(h)) => cmd_fit_probit(&cfg, FitInput::Human(&h)),
            _ => Err(UsageError("one of --traj or --human is required".into()).into()),
        },
        Command::Compare { human, ckpt_dir } => cmd_compare(&cfg, &human, &ckpt_dir),
        Command::Cluster { coeffs, bandwidth } => cmd_cluster(&cfg, &coeffs, bandwidth),
        Command::Regret { ckpt_dir, episodes } => cmd_regret(&cfg, &ckpt_dir, episodes),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(m) => {
            let failed: Vec<_> = m.runs.iter().filter(|r| r.error.is_some()).collect();
            for r in &failed {
                eprintln!("error: {}: {}", r.name, r.error.as_deref().unwrap_or(""));
            }
            let mut stdout = std::io::stdout().lock();
            for f in &m.files {
                if writeln!(stdout, "{}  {}", f.sha256, f.path).is_err() {
                    break;
                }
            }
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
