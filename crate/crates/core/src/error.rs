use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// `zI - A` could not be inverted at a grid point.
    #[error("zI - A is singular at omega = {omega}")]
    SingularFrequency { omega: f64 },

    #[error("ill-posed feedback loop: I + D_P D_K is singular")]
    AlgebraicLoop,

    #[error("closed loop is unstable (spectral radius {spectral_radius:.6})")]
    UnstableLoop { spectral_radius: f64 },

    #[error("lifted horizon {horizon} exceeds the memory guard of {limit} samples")]
    HorizonTooLarge { horizon: usize, limit: usize },

    #[error("normal matrix J^T J is singular; use a positive regularization weight")]
    SingularLearningFilter,

    #[error("resolvent I - Q(I - LJ) is singular; the ILC configuration does not converge")]
    NonConvergent,

    #[error("ILC diverged at trial {trial}")]
    Divergence { trial: usize },

    #[error("requested {requested} latent components but the data only supports {supported}; singular values: {spectrum:?}")]
    Rank {
        requested: usize,
        supported: usize,
        spectrum: Vec<f64>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss {loss:e})")]
    TrainingDivergence {
        epoch: usize,
        batch: usize,
        loss: f64,
        curve: Vec<f64>,
    },

    #[error("expert failed on trajectories {ids:?}: {reasons:?}")]
    ExpertFailed { ids: Vec<usize>, reasons: Vec<String> },

    #[error("misaligned signal sets: {0}")]
    Misaligned(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
