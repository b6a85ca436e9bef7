use thiserror::Error;

/// Broad classes of failure, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("sequence of {len} positions exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("lora: {0}")]
    Lora(String),
    #[error("quantization: {0}")]
    Quant(String),
    #[error("non-finite loss at optimizer step {step}")]
    NonFiniteLoss { step: usize },
    #[error("decode: {0}")]
    Decode(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Template(_) | Error::Lora(_) | Error::Decode(_) => {
                ErrorKind::Usage
            }
            Error::Shape { .. } | Error::Quant(_) | Error::NonFiniteLoss { .. } => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

/// Prefixes an I/O failure with the path it concerns, keeping its kind.
pub fn io_at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
