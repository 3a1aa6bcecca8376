use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} out of range {min}..={max}")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid timestep policy: {0}")]
    InvalidPolicy(String),

    #[error("unknown condition {0:?}")]
    UnknownCondition(String),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("density undefined: prior contains a delta component")]
    DeltaComponent,

    #[error("alpha_bar = {alpha_bar:e} at t = {t} is below the floor")]
    AlphaBelowFloor { t: usize, alpha_bar: f64 },

    #[error("sigma^2 = {sigma_sq} exceeds 1 - alpha_bar_prev = {limit}")]
    SigmaTooLarge { sigma_sq: f64, limit: f64 },

    #[error("interval underflow: t = {t}, c = {c}")]
    IntervalUnderflow { t: usize, c: usize },

    #[error("shifted timestep t + c = {shifted} exceeds T = {max}")]
    ShiftOverflow { shifted: usize, max: usize },

    #[error("missing context: {0}")]
    MissingContext(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("non-finite parameters at step {step}")]
    NonFinite { step: usize },

    #[error("pose {pose} out of range (K = {count})")]
    PoseOutOfRange { pose: usize, count: usize },

    #[error("unknown scene {0:?}")]
    UnknownScene(String),

    #[error("invalid model file: {0}")]
    ModelFormat(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
