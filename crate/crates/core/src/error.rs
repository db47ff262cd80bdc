use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {binding}: expected {expected}, got {got}")]
    DimensionMismatch {
        binding: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("derivative order {0} is not supported (maximum is 2)")]
    UnsupportedOrder(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown group `{0}`")]
    UnknownGroup(String),

    #[error("group schema error: {0}")]
    Schema(String),

    #[error("group layouts do not match")]
    LayoutMismatch,

    #[error("degenerate kernel: block trace of group `{group}` is {trace}")]
    DegenerateKernel { group: String, trace: f64 },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("evaluation grid is empty")]
    EmptyGrid,

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}
