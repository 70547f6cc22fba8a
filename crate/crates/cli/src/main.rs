//! `pushgrasp` command-line entry point.

mod commands;
mod plots;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pushgrasp::config::{RunConfig, Scenario};
use pushgrasp::policy::Stage;

/// Failure of a command; printed as `error[category]: message`.
#[derive(Debug)]
pub enum CliError {
    Core(pushgrasp::Error),
    Locked(String),
    Divergence(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Locked(m) => write!(f, "run directory locked: {m}"),
            CliError::Divergence(m) => write!(f, "replay diverged: {m}"),
        }
    }
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Locked(_) => "locked",
            CliError::Divergence(_) => "divergence",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.category() {
            "config" => 3,
            "parse" => 4,
            "checkpoint" => 5,
            "prerequisite" => 6,
            "incompatible" => 7,
            "io" => 8,
            "json" => 9,
            "shape" | "invalid_action" => 10,
            "locked" => 11,
            "divergence" => 12,
            _ => 1,
        }
    }
}

impl From<pushgrasp::Error> for CliError {
    fn from(e: pushgrasp::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pushgrasp", version, about = "Goal-conditioned push/grasp lab")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Effective config = defaults, then `--config`, then `PUSHGRASP_*`
/// environment variables, then each `--set` in order.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// key = value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self, base: Option<RunConfig>) -> CliResult<RunConfig> {
        let mut cfg = base.unwrap_or_default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_env()?;
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_empty(&self) -> bool {
        self.config.is_none() && self.overrides.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StageArg {
    GraspAgnostic,
    GraspExplore,
    PushTraining,
    Alternating,
    All,
}

impl StageArg {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            StageArg::GraspAgnostic => vec![Stage::GraspAgnostic],
            StageArg::GraspExplore => vec![Stage::GraspExplore],
            StageArg::PushTraining => vec![Stage::PushTraining],
            StageArg::Alternating => vec![Stage::Alternating],
            StageArg::All => Stage::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    Packed,
    Pile,
    Sparse,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Packed => Scenario::Packed,
            ScenarioArg::Pile => Scenario::Pile,
            ScenarioArg::Sparse => Scenario::Sparse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AgentArg {
    /// Greedy Q-network agent from `--checkpoint`
    Trained,
    /// Uniform random grasps and pushes on object pixels
    Random,
    /// Uniform random grasps on object pixels
    RandomGrasp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    Curves,
    Heatmap,
    EpisodeStrip,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one curriculum stage (or all of them) into a run directory
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Run directory
        #[arg(long)]
        out: PathBuf,
        /// Continue the stage from its latest checkpoint
        #[arg(long)]
        resume: bool,
        /// Start from this checkpoint instead of the previous stage's final one
        #[arg(long)]
        init: Option<PathBuf>,
        /// Run seed (the `seed` key)
        #[arg(long)]
        seed: Option<u64>,
        /// Print one line per episode
        #[arg(long, short)]
        verbose: bool,
    },
    /// Benchmark an agent and write records plus a C/GS/MN summary
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "trained")]
        agent: AgentArg,
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        /// Object counts; one summary row each
        #[arg(long = "objects", num_args = 1.., required = true)]
        objects: Vec<usize>,
        /// Scenes per object count (default `eval.n_scenes`)
        #[arg(long)]
        scenes: Option<usize>,
        /// Scene corpus seed (default `eval.base_seed`)
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded scene corpus as JSON files
    GenScenes {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        #[arg(long)]
        objects: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render training curves, Q-map heatmaps or an episode strip
    Plot {
        /// Run directory (logs and checkpoints are read from here)
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scene file for `heatmap`
        #[arg(long)]
        scene: Option<PathBuf>,
        /// Records file for `episode_strip`
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "trained")]
        agent: AgentArg,
        /// Output directory (default `<run>/plots`)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a recorded episode and report the first divergence
    Replay {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "trained")]
        agent: AgentArg,
    },
    /// Print summaries side by side with the full-scale reference rows
    Compare {
        /// Summary JSON files written by `eval`
        summaries: Vec<PathBuf>,
        /// Also write the table here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg_args = cli.config;
    match cli.command {
        Command::Train {
            stage,
            out,
            resume,
            init,
            seed,
            verbose,
        } => commands::train(&cfg_args, stage, &out, resume, init.as_deref(), seed, verbose),
        Command::Eval {
            checkpoint,
            agent,
            scenario,
            objects,
            scenes,
            seed,
            out,
        } => commands::eval(&cfg_args, checkpoint.as_deref(), agent, scenario.into(), &objects, scenes, seed, &out),
        Command::GenScenes {
            scenario,
            objects,
            count,
            seed,
            out,
        } => commands::gen_scenes(&cfg_args, scenario.into(), objects, count, seed, &out),
        Command::Plot {
            run,
            kind,
            checkpoint,
            scene,
            records,
            index,
            agent,
            out,
        } => plots::plot(&cfg_args, &run, kind, checkpoint.as_deref(), scene.as_deref(), records.as_deref(), index, agent, out.as_deref()),
        Command::Replay {
            records,
            index,
            checkpoint,
            agent,
        } => commands::replay(&cfg_args, &records, index, checkpoint.as_deref(), agent),
        Command::Compare { summaries, out } => commands::compare(&summaries, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::from(e.exit_code())
        }
    }
}
