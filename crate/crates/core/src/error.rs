//! Crate-wide error type. Every failure carries a stable machine-readable
//! code (the variant name) so the CLI can emit single-line parsable errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no pixel had valid depth in any input view")]
    NoValidDepth,
    #[error("bad intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no valid pixels for loss evaluation")]
    NoValidPixels,
    #[error("training loss became non-finite at iteration {iteration}")]
    DivergenceDetected { iteration: usize },
    #[error("view has no annotated masks")]
    NoMasks,
    #[error("mask id {0} has no target feature")]
    MissingTargetFeature(u32),
    #[error("no pixel passed the relevance threshold in any selected view")]
    EmptyQueryResult,
    #[error("no valid 3x3 depth neighborhood anywhere in the map")]
    NoValidNeighborhood,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("no cloud point with a normal within {radius} m of contact {contact}")]
    NoNearbySurface { contact: usize, radius: f64 },
    #[error("gripper contacts are degenerate (|c2 - c1| < 1e-6 m)")]
    DegenerateContacts,
    #[error("no feasible grasp among {0} proposals")]
    NoFeasibleGrasp(usize),
    #[error("parse error in {path}: {detail}")]
    ParseError { path: String, detail: String },
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable short code for machine-parsable CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::NoValidDepth => "NoValidDepth",
            Error::BadIntrinsics(_) => "BadIntrinsics",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NoValidPixels => "NoValidPixels",
            Error::DivergenceDetected { .. } => "DivergenceDetected",
            Error::NoMasks => "NoMasks",
            Error::MissingTargetFeature(_) => "MissingTargetFeature",
            Error::EmptyQueryResult => "EmptyQueryResult",
            Error::NoValidNeighborhood => "NoValidNeighborhood",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::NoNearbySurface { .. } => "NoNearbySurface",
            Error::DegenerateContacts => "DegenerateContacts",
            Error::NoFeasibleGrasp(_) => "NoFeasibleGrasp",
            Error::ParseError { .. } => "ParseError",
            Error::MissingFile(_) => "MissingFile",
            Error::InvariantViolation(_) => "InvariantViolation",
            Error::Io(_) => "Io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
