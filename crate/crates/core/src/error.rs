use thiserror::Error;

/// The named inequality that a grid-parameter search could not satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inequality {
    /// Taylor remainder of the coefficient fields over one cube.
    TaylorRemainder,
    /// Joint modulus of continuity at the cube reach.
    Modulus,
    /// Measure of the domain not covered by whole cubes.
    OuterCover,
    /// Measure of the domain not covered by the shrunk cubes.
    InnerCover,
    /// The L^r distance estimate.
    LrBound,
}

impl std::fmt::Display for Inequality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Inequality::TaylorRemainder => "taylor-remainder",
            Inequality::Modulus => "modulus",
            Inequality::OuterCover => "outer-cover",
            Inequality::InnerCover => "inner-cover",
            Inequality::LrBound => "lr-bound",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tensor is not symmetric (deviation {deviation:.3e})")]
    NotSymmetric { deviation: f64 },
    #[error("basis is not orthonormal (defect {defect:.3e})")]
    NotOrthonormal { defect: f64 },
    #[error("non-finite value at cell {cell}")]
    NonFinite { cell: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("step {step} is not a usable grid step: {reason}")]
    Step { step: f64, reason: String },
    #[error("empty sequence")]
    EmptySequence,
    #[error("incompatible measures: {0}")]
    Incompatible(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("grid resolution exhausted: {inequality} fails (measured {measured:.4e}, budget {budget:.4e}, delta {delta:.4e})")]
    GridResolution {
        inequality: Inequality,
        measured: f64,
        budget: f64,
        delta: f64,
    },
    #[error("estimate did not converge ({0}); pass an override to use it anyway")]
    Unconverged(String),
    #[error("derivative order {k} exceeds jet order {p}")]
    Order { k: usize, p: usize },
    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
