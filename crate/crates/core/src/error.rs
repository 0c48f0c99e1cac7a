use std::fmt;
use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug)]
pub enum Error {
    /// Shapes or extents that do not compose.
    Dimension(String),
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Operation is not valid in the current state (e.g. a spent tape).
    State(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    /// Malformed dataset file; `offset` is the byte where parsing failed.
    Format { offset: u64, message: String },
    /// Model spec that cannot be built; `layer` is the offending index.
    Spec { layer: Option<usize>, message: String },
    /// A checked mathematical property did not hold.
    PropertyViolation { check: String, detail: String },
    /// Training produced a non-finite loss.
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    Io(io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn spec(layer: impl Into<Option<usize>>, msg: impl Into<String>) -> Self {
        Error::Spec {
            layer: layer.into(),
            message: msg.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Error::Spec {
                layer: Some(layer),
                message,
            } => write!(f, "spec error at layer {layer}: {message}"),
            Error::Spec {
                layer: None,
                message,
            } => write!(f, "spec error: {message}"),
            Error::PropertyViolation { check, detail } => {
                write!(f, "property violation in {check}: {detail}")
            }
            Error::NonFiniteLoss { epoch, batch, loss } => write!(
                f,
                "non-finite loss {loss} at epoch {epoch}, batch {batch}"
            ),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Json(err) => write!(f, "json error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Json(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Json(err)
    }
}
