use thiserror::Error;

/// Errors raised by the geometry, training, sampling and density code.
#[derive(Debug, Error)]
pub enum GeoError {
    /// Caller supplied something outside the documented domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// Vector too close to zero to normalize.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A closed form hits a removable or true singularity (antipodes, log of zero).
    #[error("singularity: {0}")]
    Singularity(String),

    /// Non-finite value produced during a computation.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Adaptive integrator could not keep the step size above its floor.
    #[error("ODE solver stalled at t = {t}: step {step:e} below floor ({accepted} accepted, {rejected} rejected)")]
    Stiffness {
        t: f64,
        step: f64,
        accepted: usize,
        rejected: usize,
    },

    /// A sample set is too spread out to estimate a concentration.
    #[error("under-concentrated samples: mean resultant length {0:e}")]
    UnderConcentrated(f64),

    /// Malformed dataset or checkpoint content.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GeoError {
    /// True for failures that come from the numerics rather than from the
    /// caller's inputs or the filesystem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            GeoError::Numeric(_)
                | GeoError::Stiffness { .. }
                | GeoError::Singularity(_)
                | GeoError::UnderConcentrated(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GeoError>;
