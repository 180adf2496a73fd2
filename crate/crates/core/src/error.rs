use std::io;
use std::path::PathBuf;

use hwlab_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical blow-up at step {step} (t = {time}): max |omega| = {max_abs_omega:e}")]
    BlowUp { step: u64, time: f64, max_abs_omega: f64 },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    /// Inversion stopped on a non-finite loss or gradient; `partial` holds
    /// the trace up to and including the failing step.
    #[error("non-finite inversion loss at step {step}")]
    InversionDiverged { step: u64, partial: Box<crate::learn::InversionResult> },
    #[error("checksum mismatch in record {record}")]
    Checksum { record: u64 },
    #[error("missing input {}: {source}", path.display())]
    MissingInput { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn data(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}
