use ferbench_core::analytics::AnalyticsError;
use ferbench_core::autodiff::AutodiffError;
use ferbench_core::saliency::SaliencyError;
use ferbench_core::stimuli::StimuliError;
use ferbench_core::training::TrainingError;
use ferbench_core::trial::TrialError;
use ferbench_service::ServiceError;
use thiserror::Error;

/// Failure of a command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),
    /// Missing, unreadable or inconsistent inputs.
    #[error("{0}")]
    Data(String),
    /// Non-finite values or a degenerate statistic.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

fn autodiff_numeric(e: &AutodiffError) -> bool {
    matches!(e, AutodiffError::NonFinite(_))
}

fn training_numeric(e: &TrainingError) -> bool {
    match e {
        TrainingError::Autodiff(a) => autodiff_numeric(a),
        TrainingError::Pair { source, .. } => training_numeric(source),
        _ => false,
    }
}

fn saliency_numeric(e: &SaliencyError) -> bool {
    match e {
        SaliencyError::Diverged { .. } => true,
        SaliencyError::Autodiff(a) => autodiff_numeric(a),
        _ => false,
    }
}

fn analytics_numeric(e: &AnalyticsError) -> bool {
    match e {
        AnalyticsError::Degenerate(_) => true,
        AnalyticsError::Training(t) => training_numeric(t),
        AnalyticsError::Saliency(s) => saliency_numeric(s),
        _ => false,
    }
}

fn classify(numeric: bool, msg: String) -> CliError {
    if numeric {
        CliError::Numeric(msg)
    } else {
        CliError::Data(msg)
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        classify(autodiff_numeric(&e), e.to_string())
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        classify(training_numeric(&e), e.to_string())
    }
}

impl From<SaliencyError> for CliError {
    fn from(e: SaliencyError) -> Self {
        classify(saliency_numeric(&e), e.to_string())
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        classify(analytics_numeric(&e), e.to_string())
    }
}

impl From<StimuliError> for CliError {
    fn from(e: StimuliError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrialError> for CliError {
    fn from(e: TrialError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
