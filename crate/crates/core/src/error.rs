use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("operator with input dimension {dim} exceeds the oracle limit of {limit}")]
    OracleScale { dim: usize, limit: usize },

    #[error("layer {layer} has a zero spectral-norm estimate and no step override; converge the network first")]
    DegenerateLayer { layer: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("did not converge after {iterations} iterations: {what}")]
    Convergence { what: &'static str, iterations: usize },

    #[error("integration blew up after t = {last_valid_time}")]
    IntegrationBlowup { last_valid_time: f64 },

    #[error("network uses a relaxed step override; its Lipschitz constant is unknown")]
    RelaxedNetwork,

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch}, step {step} (layer sigmas {sigmas:?}, grad norm {grad_norm})")]
    NonFiniteLoss {
        epoch: usize,
        step: u64,
        sigmas: Vec<f64>,
        grad_norm: f64,
    },

    #[error(transparent)]
    Dataset(#[from] crate::data::DatasetError),

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
