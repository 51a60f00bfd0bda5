use thiserror::Error;

/// Errors raised by the solvers and their input validation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("violated invariants: {} ({detail})", invariants.join(", "))]
    Violated { invariants: Vec<&'static str>, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point ({x}, {y}) lies inside hole {hole}")]
    InsideHole { hole: usize, x: f64, y: f64 },

    #[error("vorticity support overlaps hole {0}")]
    SupportOverlap(usize),

    #[error("grid spacing {h} exceeds the resolution limit {limit}")]
    Resolution { h: f64, limit: f64 },

    #[error("rank-deficient collocation system (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("Neumann iteration is not contracting (increments {0:?}); reduce the volume fraction")]
    NonContraction(Vec<f64>),

    #[error("padding factor {0} is too small, at least 2 is required")]
    Padding(usize),

    #[error("point ({x}, {y}) lies outside the grid")]
    OutOfGrid { x: f64, y: f64 },

    #[error("time step violates the CFL guard: dt*max|u| = {lhs:e} > {rhs:e}")]
    Cfl { lhs: f64, rhs: f64 },

    #[error("vorticity support is closer than {margin} to the porous region")]
    SupportMargin { margin: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
