use thiserror::Error;

/// Failure modes shared across the numerical modules.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A pre-projection point left the tubular neighbourhood where the
    /// closest-point retraction is well defined.
    #[error("point left the tubular neighbourhood (distance {dist:.3e}, radius {radius:.3e})")]
    OutsideTubularNeighborhood { dist: f64, radius: f64 },

    /// Horizon, step size and grid do not tile consistently.
    #[error("inconsistent grid: {0}")]
    BadGrid(String),

    /// A transport step hit an (anti)degenerate chord rotation.
    #[error("degenerate transport step at index {step}")]
    DegenerateStep { step: usize },

    /// Reserved: the catalog fibrations are full rank everywhere.
    #[error("horizontal lift is singular at the requested point")]
    SingularLift,

    /// Supplied vertical data varies along fibers beyond tolerance.
    #[error("fields are not right-invariant (max fiber deviation {max_dev:.3e})")]
    NotRightInvariant { max_dev: f64 },

    /// A 1-D map that must be monotone is not.
    #[error("1-D map loses monotonicity near node {index}")]
    NonMonotone1D { index: usize },

    /// An iterative solver failed to contract. `gaps` is the recorded
    /// per-iteration gap sequence, most recent last.
    #[error("no convergence after {iterations} iterations (last gap {last_gap:.3e})")]
    NoConvergence { iterations: usize, last_gap: f64, gaps: Vec<f64> },

    /// Density lost strict positivity or smoothness guarantees.
    #[error("density is not smooth/positive enough for this operation")]
    NonSmoothDensity,

    /// Linear solver diverged or stalled above its residual target.
    #[error("solver diverged (residual {residual:.3e})")]
    SolverDivergence { residual: f64 },

    /// A field norm exceeded the blow-up guard.
    #[error("numerical blow-up (norm {norm:.3e})")]
    Blowup { norm: f64 },

    /// An argument required to be horizontal has a vertical part.
    #[error("argument is not horizontal (vertical mass {vertical:.3e})")]
    NotHorizontal { vertical: f64 },

    /// A displacement field does not define an invertible map.
    #[error("map is not invertible (min Jacobian {min_jac:.3e})")]
    NonInvertibleMap { min_jac: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
