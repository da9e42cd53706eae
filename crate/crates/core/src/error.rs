//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a precondition (bad geometry, bad
    /// parameter signs, inconsistent horizons, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// The input document does not match the expected JSON schema.
    /// `path` points at the offending field (e.g. `tracks[2].samples[7]`).
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    /// The document parsed but violates a dataset invariant.
    #[error(transparent)]
    Validation(#[from] ValidationError),

    /// The inflow stayed jammed for longer than the deadlock limit.
    #[error("congestion: inflow jammed at simulated time {sim_time_s:.1} s")]
    Congestion { sim_time_s: f64 },

    /// A kernel density cannot be fit (fewer than two samples, or zero spread).
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    /// The optimizer could not start (non-finite objective at the initial point).
    #[error("optimizer initialization failed: {0}")]
    OptimizerInit(String),

    /// Every restart of a multi-start calibration ended in a penalty region.
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    /// A simulation state invariant broke mid-run. This is a bug trap, not a
    /// user error.
    #[error("internal consistency error: {0}")]
    Internal(String),
}

/// A dataset invariant violation, classified so callers (and tests) can
/// distinguish failure modes.
#[derive(Debug, Error)]
#[error("invalid dataset ({kind:?}): {context}")]
pub struct ValidationError {
    pub kind: ValidationKind,
    pub context: String,
}

impl ValidationError {
    pub fn new(kind: ValidationKind, context: impl Into<String>) -> Self {
        Self {
            kind,
            context: context.into(),
        }
    }
}

/// The classes of dataset invariant violations the validator detects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationKind {
    /// Two tracks share an id.
    DuplicateTrackId,
    /// Sample timestamps are not strictly increasing within a track.
    NonIncreasingTime,
    /// A class probability mass function does not sum to 1 (within 1e-9).
    ClassPmfSum,
    /// The mode of the class PMF disagrees with the declared class.
    ClassPmfMode,
    /// Track length or width is not strictly positive.
    NonPositiveSize,
    /// Median sample spacing exceeds 0.5 s.
    SampleRate,
    /// A track has no samples.
    EmptyTrack,
    /// A numeric field is NaN or infinite.
    NonFiniteValue,
    /// A per-field uncertainty is negative.
    NegativeSigma,
    /// An occlusion interval has inverted bounds.
    OcclusionBounds,
    /// Simulated data whose geographic and road-map coordinates disagree.
    SimulatedGeometry,
}
