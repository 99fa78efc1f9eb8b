use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },

    #[error("unknown built-in system `{0}`")]
    UnknownSystem(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("the origin is not an equilibrium: F(0) = {residual:?}")]
    NotEquilibrium { residual: Vec<f64> },

    #[error("equilibrium is not hyperbolic: eigenvalue {re} + {im}i")]
    NonHyperbolic { re: f64, im: f64 },

    #[error("equilibrium is not stable: eigenvalue {re} + {im}i")]
    Unstable { re: f64, im: f64 },

    #[error("Jacobian is defective at eigenvalue {re} + {im}i (multiplicity {multiplicity}, eigenspace dimension {rank})")]
    Defective {
        re: f64,
        im: f64,
        multiplicity: usize,
        rank: usize,
    },

    #[error("collocation points {i} and {j} are closer than {min_dist:e}")]
    DuplicatePoints { i: usize, j: usize, min_dist: f64 },

    #[error("collocation point {0} lies outside the domain")]
    PointOutsideDomain(usize),

    #[error("Gram matrix is not numerically positive definite (pivot {pivot}) at {bits} bits")]
    NotPositiveDefinite { pivot: usize, bits: u32 },

    #[error("too few collocation points survived filtering: {survivors} (need at least {needed})")]
    FilterStarvation { survivors: usize, needed: usize },

    #[error("missing eigenfunction for eigenvalue {re} + {im}i")]
    MissingEigenfunction { re: f64, im: f64 },

    #[error("point {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn at(index: usize, source: Error) -> Self {
        Error::AtIndex {
            index,
            source: Box::new(source),
        }
    }
}
