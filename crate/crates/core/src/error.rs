//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// Each variant maps to a stable machine-readable kind string (see
/// [`Error::kind`]) so front ends can report errors as structured data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or mask shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A video layout constraint was violated (e.g. extent not divisible
    /// by the patch size, or a block grid that does not factor into 3D).
    #[error("layout error: {0}")]
    Layout(String),

    /// An input broke a documented contract (e.g. a probability row that
    /// does not sum to one, or a fully masked attention row).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A scalar parameter is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An item could not be routed to any configured queue.
    #[error("routing error: {0}")]
    Routing(String),

    /// A single item exceeds the batch budget on its own.
    #[error("oversize item: {0}")]
    OversizeItem(String),

    /// The scheduler could not honor the requested batch mix because a
    /// required modality was never supplied.
    #[error("starvation: {0}")]
    Starvation(String),

    /// Parameter sets being merged do not share names and shapes.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// A serialized artifact could not be decoded.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable identifier for the error class, used in machine-readable
    /// error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Layout(_) => "layout",
            Error::Contract(_) => "contract",
            Error::Parameter(_) => "parameter",
            Error::Routing(_) => "routing",
            Error::OversizeItem(_) => "oversize-item",
            Error::Starvation(_) => "starvation",
            Error::Alignment(_) => "alignment",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_are_stable() {
        assert_eq!(Error::Dimension("x".into()).kind(), "dimension");
        assert_eq!(Error::OversizeItem("x".into()).kind(), "oversize-item");
        assert_eq!(Error::Starvation("x".into()).kind(), "starvation");
    }
}
