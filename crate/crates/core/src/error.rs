use thiserror::Error;

/// Errors raised by the rank model, the optimizer and the simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The requested batch count cannot be realized by any recoding scheme.
    #[error(
        "infeasible batch count B={batches}: target rank {target:.6} outside ({low:.6}, {high:.6}]"
    )]
    InfeasibleBatches {
        batches: usize,
        target: f64,
        low: f64,
        high: f64,
    },

    /// The exact idle-time chain only supports an integral source slot length.
    #[error("unsupported omega {0}: the exact idle-time chain needs an integer omega")]
    UnsupportedOmega(f64),

    /// A search would exceed its evaluation budget.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// A simulated transfer did not collect enough rank within the batch guard.
    #[error("transfer did not reach rank {target} within {max_batches} batches")]
    NonTermination { target: usize, max_batches: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
