use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape error at layer {layer}: {message}")]
    LayerShape { layer: usize, message: String },

    #[error("degenerate output length: {0}")]
    DegenerateLength(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("payload corrupted: crc {expected:#010x} != {actual:#010x}")]
    Corruption { expected: u32, actual: u32 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub(crate) fn at_layer(self, layer: usize) -> Self {
        match self {
            Error::Shape(message) | Error::DegenerateLength(message) => {
                Error::LayerShape { layer, message }
            }
            other => other,
        }
    }
}
