use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("unsupported format version {found} at byte {offset} (supported: {supported})")]
    Version { found: u16, supported: u16, offset: u64 },

    #[error("checksum mismatch in tensor block `{tensor}` at byte {offset}")]
    Checksum { tensor: String, offset: u64 },

    #[error("checkpoint topology mismatch (checkpoint vs expected): {}", .0.join(", "))]
    Topology(Vec<String>),

    #[error("training diverged at step {step} (last finite loss {last_finite})")]
    Divergence { step: u64, last_finite: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Version { .. } => "version",
            Error::Checksum { .. } => "checksum",
            Error::Topology(_) => "topology",
            Error::Divergence { .. } => "divergence",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
