//! Run configuration: one TOML file validated against the typed schema below.
//! Unknown keys are rejected with the offending line. Only the output path
//! and thread count may be overridden from the environment.

use std::path::{Path, PathBuf};

use rcm_core::coarse::Assignment;
use rcm_core::eval::{EvalOptions, FeatureSource};
use rcm_core::model::{MatchOptions, SwitchMode};
use rcm_core::scene::SceneConfig;
use rcm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ENV_OUT: &str = "RCM_OUT";
pub const ENV_THREADS: &str = "RCM_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Learned,
    Planted,
}

/// Matching and scoring settings shared by `match`, `eval` and `ablate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub assignment: Assignment,
    pub switch: SwitchMode,
    pub bypass_attention: bool,
    pub features: FeatureKind,
    /// Descriptor noise in planted mode.
    pub planted_noise: f64,
    /// Keypoints per source image in planted mode.
    pub planted_keypoints: usize,
    /// Source keypoints per orientation for ground-truth counting.
    pub gt_keypoints: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            assignment: Assignment::M2o,
            switch: SwitchMode::Auto,
            bypass_attention: false,
            features: FeatureKind::Learned,
            planted_noise: 0.0,
            planted_keypoints: 128,
            gt_keypoints: 128,
        }
    }
}

impl EvalSection {
    pub fn match_options(&self) -> MatchOptions {
        MatchOptions { switch: self.switch, assignment: self.assignment, bypass_attention: self.bypass_attention }
    }

    pub fn eval_options(&self, seed: u64, threads: usize) -> EvalOptions {
        let features = match self.features {
            FeatureKind::Learned => FeatureSource::Learned,
            FeatureKind::Planted => {
                FeatureSource::Planted { noise: self.planted_noise, keypoints: self.planted_keypoints }
            }
        };
        EvalOptions { matching: self.match_options(), features, seed, threads }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    /// Scenes emitted by `scene-gen`.
    pub count: usize,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
            count: 10,
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The file at `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if self.eval.planted_keypoints == 0 || self.eval.gt_keypoints == 0 {
            return Err(CliError::Config("keypoint counts must be positive".into()));
        }
        if !(self.eval.planted_noise >= 0.0) {
            return Err(CliError::Config("planted_noise must be non-negative".into()));
        }
        self.scene.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `RCM_OUT` and `RCM_THREADS`.
    pub fn apply_env(&mut self) -> CliResult<()> {
        self.apply_overrides(std::env::var(ENV_OUT).ok(), std::env::var(ENV_THREADS).ok())
    }

    pub fn apply_overrides(&mut self, out: Option<String>, threads: Option<String>) -> CliResult<()> {
        if let Some(out) = out.filter(|s| !s.is_empty()) {
            self.out = PathBuf::from(out);
        }
        if let Some(t) = threads.filter(|s| !s.is_empty()) {
            self.threads = t
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Config(format!("{ENV_THREADS} must be a positive integer, got {t:?}")))?;
        }
        Ok(())
    }
}
