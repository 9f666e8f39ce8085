use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum NeldError {
    #[error("invalid flow matrix: {0}")]
    InvalidFlow(String),

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite coordinate for particle {particle} (numerical blow-up)")]
    NonFinite { particle: usize },

    #[error("particles {i} and {j} overlap (r = {r:e})")]
    Overlap { i: usize, j: usize, r: f64 },

    #[error("particle {particle} lies outside the canonical cell")]
    OutsideCell { particle: usize },

    #[error("noise step size mismatch: {expected} vs {found}")]
    StepMismatch { expected: f64, found: f64 },

    #[error("noise dimension {found} does not match state dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{steps} fine steps are not divisible by 2^{level}")]
    Divisibility { steps: usize, level: u32 },

    #[error("window [{start}, {start} + {len}] is not aligned to the fine grid h = {h}")]
    MisalignedWindow { start: f64, len: f64, h: f64 },

    #[error("reference expansion requested for particle {particle}, which crosses the cell boundary")]
    ReferenceCrossing { particle: usize },

    #[error("scheme {0} has no corrected twin")]
    NoTwin(&'static str),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NeldError>;
