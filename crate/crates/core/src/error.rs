use thiserror::Error;

use crate::solvers::SolverTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("custom backward rule returned {got} gradients for {expected} inputs")]
    CustomArity { expected: usize, got: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("solver diverged after {} evaluations (residual {:.3e})", .trace.l_stop, .trace.final_residual())]
    Diverged { trace: SolverTrace },

    #[error("linear solve did not converge: residual {residual:.3e} after {evaluations} evaluations")]
    LinearSolveNotConverged { residual: f64, evaluations: usize },

    #[error("invalid solver config: {0}")]
    SolverConfig(String),

    #[error("non-finite loss at epoch {epoch}")]
    NanLoss { epoch: usize },

    #[error("checkpoint: {msg} (at byte {offset})")]
    Checkpoint { offset: usize, msg: String },

    #[error("checkpoint: unsupported container version {0}")]
    UnsupportedVersion(u8),

    #[error("wav: {msg} (at byte {offset})")]
    Wav { offset: usize, msg: String },

    #[error("stft: {0}")]
    Stft(String),

    #[error("config: {0}")]
    Config(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
