use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes do not line up for the named operation.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// An operation produced (or was handed) NaN or an infinity.
    NonFinite {
        op: &'static str,
    },
    InvalidArgument {
        name: &'static str,
        detail: String,
    },
    /// Not a probability vector (out of range or not summing to one).
    InvalidProbability {
        detail: String,
    },
    /// Training loss became non-finite; carries the 0-based epoch.
    Divergence {
        epoch: usize,
    },
    /// Mutual information came out negative beyond rounding slack.
    NegativeMutualInformation {
        value: f64,
    },
    Empty {
        what: &'static str,
    },
    MissingGroundTruth {
        case: String,
    },
    /// AUROC needs both classes among the pooled pixels.
    SingleClass,
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { name, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "{op}: non-finite value"),
            Error::InvalidArgument { name, detail } => write!(f, "invalid {name}: {detail}"),
            Error::InvalidProbability { detail } => {
                write!(f, "invalid probability vector: {detail}")
            }
            Error::Divergence { epoch } => write!(f, "training diverged in epoch {epoch}"),
            Error::NegativeMutualInformation { value } => {
                write!(f, "mutual information {value:e} is negative beyond rounding")
            }
            Error::Empty { what } => write!(f, "empty {what}"),
            Error::MissingGroundTruth { case } => write!(f, "case {case} has no ground truth"),
            Error::SingleClass => f.write_str("labels contain a single class; AUROC undefined"),
        }
    }
}

impl core::error::Error for Error {}
