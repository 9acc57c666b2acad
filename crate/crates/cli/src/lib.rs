//! `rcm` command-line front end: scene generation, training, matching,
//! evaluation, ablation, ground-truth counting and gradient checks.

pub mod commands;
pub mod config;
pub mod error;
pub mod prov;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rcm_core::coarse::Assignment;
use rcm_core::model::SwitchMode;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rcm", version, about = "Semi-sparse feature matching on synthetic two-view scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded set of scenes and their manifest.
    SceneGen(CommonArgs),
    /// Train a model; writes weights, sidecar and loss curve.
    Train(CommonArgs),
    /// Match an image pair or every scene of a manifest.
    Match(MatchArgs),
    /// Evaluate a model on a manifest.
    Eval(EvalArgs),
    /// Compare O2O, M2O and M2O with the view switcher.
    Ablate(EvalArgs),
    /// Count achievable ground-truth coarse matches per configuration.
    GtCount(GtCountArgs),
    /// Finite-difference gradient checks.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output location (overrides the config and RCM_OUT).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SwitchFlag {
    Auto,
    On,
    Off,
}

impl From<SwitchFlag> for SwitchMode {
    fn from(f: SwitchFlag) -> Self {
        match f {
            SwitchFlag::Auto => SwitchMode::Auto,
            SwitchFlag::On => SwitchMode::On,
            SwitchFlag::Off => SwitchMode::Off,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AssignmentFlag {
    M2o,
    O2o,
}

impl From<AssignmentFlag> for Assignment {
    fn from(f: AssignmentFlag) -> Self {
        match f {
            AssignmentFlag::M2o => Assignment::M2o,
            AssignmentFlag::O2o => Assignment::O2o,
        }
    }
}

/// Flags that override the `[eval]` section.
#[derive(Debug, Clone, Args)]
pub struct MatchFlags {
    #[arg(long, value_enum)]
    pub force_switch: Option<SwitchFlag>,
    #[arg(long, value_enum)]
    pub assignment: Option<AssignmentFlag>,
    /// Score raw descriptors, skipping position encoding and attention.
    #[arg(long)]
    pub bypass_attention: bool,
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Weight blob; its sidecar is the same path with a `.json` extension.
    #[arg(long)]
    pub weights: PathBuf,
    /// First image (`.pgm` or `.dpt`).
    #[arg(long, requires = "b", conflicts_with = "manifest")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Match every scene of this manifest instead of a single pair.
    #[arg(long, required_unless_present = "a")]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub flags: MatchFlags,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Weight blob; fresh weights from `[train.model]` when omitted.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub flags: MatchFlags,
}

#[derive(Debug, Clone, Args)]
pub struct GtCountArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Source keypoints per orientation (overrides `eval.gt_keypoints`).
    #[arg(long)]
    pub keypoints: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GradCheckArgs {
    /// Scope name, or `all`.
    #[arg(long, default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::SceneGen(a) => commands::scene_gen(&a).map(|_| ()),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Match(a) => commands::match_cmd(&a),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Ablate(a) => commands::ablate(&a).map(|_| ()),
        Command::GtCount(a) => commands::gt_count(&a).map(|_| ()),
        Command::GradCheck(a) => commands::grad_check(&a).map(|_| ()),
    }
}
