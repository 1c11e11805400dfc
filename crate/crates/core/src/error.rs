use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ill-conditioned input: {0}")]
    IllConditioned(String),

    #[error("point behind camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("degenerate point (depth {depth})")]
    DegeneratePoint { depth: f64 },

    #[error("underdetermined problem: {got} constraints, need at least {needed}")]
    Underdetermined { got: usize, needed: usize },

    #[error("no valid residuals")]
    NoValidResiduals,

    #[error("unreliable disparity {disparity} px")]
    UnreliableDisparity { disparity: f64 },

    #[error("insufficient parallax ({angle_deg:.4} deg)")]
    InsufficientParallax { angle_deg: f64 },

    #[error("alignment failed: {matches} matches, need {required}")]
    AlignmentFailed { matches: usize, required: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("trajectories do not overlap in time")]
    NoOverlap,

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("insufficient data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}
