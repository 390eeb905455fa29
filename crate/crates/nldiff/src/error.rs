use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum NldError {
    /// Invalid configuration value or unknown key. When several problems are
    /// found while parsing a config file they are aggregated into one message.
    #[error("configuration error: {0}")]
    Config(String),

    /// The asymptotic structure this crate verifies only holds for N >= 3;
    /// lower dimensions are rejected on the physics path.
    #[error("unsupported dimension {dim}: kernels require N >= 3")]
    UnsupportedDimension { dim: usize },

    /// Grid too coarse (or box too small) for the requested operation.
    #[error("resolution error: {0}")]
    Resolution(String),

    /// Hole geometry violates placement constraints.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Two lattice objects built for different grids were combined.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// An iteration failed to converge. Carries the tail of the residual
    /// history for diagnosis.
    #[error(
        "{what} did not converge within {iterations} iterations (last residuals: {history:?})"
    )]
    Convergence {
        what: String,
        iterations: usize,
        history: Vec<f64>,
    },

    /// Dense-oracle node cap exceeded.
    #[error("oracle-scale error: {nodes} nodes exceeds the dense-oracle cap of {cap}")]
    OracleScale { nodes: usize, cap: usize },

    /// A numerical guarantee was not met (quadrature tolerance, spectral
    /// imaginary residue, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Fit or sample range is empty or too small.
    #[error("range error: {0}")]
    Range(String),

    /// Measured signal below the noise floor; the message says how to get
    /// more signal.
    #[error("signal error: {0}")]
    Signal(String),

    /// Input data degenerate for the requested reduction.
    #[error("degenerate data: {0}")]
    Degenerate(String),

    /// Input field violates a data precondition (negative, NaN, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A pipeline stage is missing inputs; `produce_with` names the command
    /// that generates them.
    #[error("missing input `{missing}`: run `{produce_with}` first")]
    Dependency {
        missing: String,
        produce_with: String,
    },

    /// On-disk format violation (snapshot magic/version/payload).
    #[error("format error: {0}")]
    Format(String),

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NldError>;
