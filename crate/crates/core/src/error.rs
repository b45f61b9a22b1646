use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("moment undefined: {0}")]
    MomentUndefined(String),

    #[error("invalid strategy parameters: {0}")]
    InvalidParams(String),

    /// The caller asked the normal-mode quantizer to encode a state outside
    /// its partition; the encoder should have chosen the emergency codeword.
    #[error("state {x} outside partition [-{half_width}, {half_width}]")]
    OutOfPartition { x: f64, half_width: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("state diverged at step {step} (|x| = {magnitude:e})")]
    Diverged { step: u64, magnitude: f64 },

    #[error("not second-moment stabilizable: sigma_A^2 = {variance} >= 1")]
    Unstabilizable { variance: f64 },

    #[error("finite 4+eps moments required: alpha = {alpha} must exceed 4")]
    AlphaTooSmall { alpha: f64 },

    #[error(
        "emergency tail series does not converge (ratio {ratio:e} >= 1); increase P or M0"
    )]
    TailSeriesDiverges { ratio: f64 },

    #[error("time index {index} out of range (trace has {len} rows)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("round-end time undefined: emergency still open at last index {last_index}")]
    RoundUnterminated { last_index: usize },

    #[error("insufficient trials: have {have}, need at least {need}")]
    InsufficientTrials { have: usize, need: usize },

    #[error("all {trials} trials diverged")]
    AllDiverged { trials: usize },

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
