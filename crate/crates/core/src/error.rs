use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("build function is not deterministic: forward passes differ ({first} vs {second})")]
    Determinism { first: f64, second: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocab { id: u32, vocab: usize },

    #[error("layer index {index} out of range for {layers} layers")]
    LayerIndex { index: usize, layers: usize },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("training diverged at step {step} (lambda = {lambda}, lr = {lr})")]
    Divergence { step: u64, lambda: f64, lr: f64 },

    #[error("invalid task spec: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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
}
