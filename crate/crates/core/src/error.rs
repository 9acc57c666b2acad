use thiserror::Error;

/// Errors produced by the matching library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate point: homogeneous coordinate {0:e} is too close to zero")]
    DegeneratePoint(f64),
    #[error("homography is singular (|det| = {0:e})")]
    SingularHomography(f64),
    #[error("rank-deficient design matrix: null space dimension {0}")]
    RankDeficient(usize),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("no model: no hypothesis reached {0} inliers")]
    NoModel(usize),
    #[error("insufficient overlap: {0} ground-truth correspondences (need at least 8)")]
    InsufficientOverlap(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("no ground-truth matches to supervise")]
    EmptyGroundTruth,
    #[error("training diverged at step {step}: non-finite loss (last finite step {last_finite:?})")]
    Divergence { step: usize, last_finite: Option<usize> },
    #[error("missing ground truth for scene {0}")]
    MissingTruth(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
