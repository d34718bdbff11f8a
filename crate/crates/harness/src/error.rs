use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] taililc::Error),

    /// Outputs on disk do not belong to the current config, or are missing
    /// or damaged.
    #[error("stale manifest: {0}")]
    Stale(String),

    #[error("training diverged; loss curve written to {curve}: {source}")]
    TrainingDiverged { curve: String, source: taililc::Error },

    #[error("every evaluation cell failed: {0}")]
    EvalFailed(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("acceptance check failed: {0}")]
    Acceptance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 numerical failure, 4 stale manifest,
    /// 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use taililc::Error as E;
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(e) => match e {
                E::InvalidParameter(_)
                | E::Dimension(_)
                | E::HorizonTooLarge { .. }
                | E::UnstableLoop { .. }
                | E::AlgebraicLoop
                | E::Rank { .. } => 2,
                E::Io(_) | E::Json(_) | E::Csv(_) => 1,
                _ => 3,
            },
            HarnessError::TrainingDiverged { .. } | HarnessError::EvalFailed(_) => 3,
            HarnessError::Stale(_) | HarnessError::Format(_) => 4,
            HarnessError::Acceptance(_) | HarnessError::Io(_) | HarnessError::Json(_) | HarnessError::Csv(_) => 1,
        }
    }
}
