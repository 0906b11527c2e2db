use skelfree::mocap::dataset::DatasetError;
use skelfree::mocap::MocapError;
use skelfree::model::ModelError;
use skelfree::skeleton::SkeletonError;
use skelfree::tasks::TaskError;
use skelfree::training::TrainingError;

/// Command failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("model: {0}")]
    Model(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Model(_) => 4,
            CliError::Numeric(_) => 5,
        }
    }
}

impl From<MocapError> for CliError {
    fn from(e: MocapError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SkeletonError> for CliError {
    fn from(e: SkeletonError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite(_) => CliError::Numeric(e.to_string()),
            ModelError::Io(_) => CliError::Data(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

impl From<candle_core::Error> for CliError {
    fn from(e: candle_core::Error) -> Self {
        CliError::Model(e.to_string())
    }
}

impl From<TaskError> for CliError {
    fn from(e: TaskError) -> Self {
        match e {
            TaskError::Model(m) => m.into(),
            TaskError::Parameter(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainingError> for CliError {
    fn from(e: TrainingError) -> Self {
        match e {
            TrainingError::Model(m) => m.into(),
            TrainingError::Tensor(_) => CliError::Model(e.to_string()),
            TrainingError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainingError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<figment::Error> for CliError {
    fn from(e: figment::Error) -> Self {
        let msgs: Vec<String> = e
            .into_iter()
            .map(|e| {
                let key = if e.path.is_empty() { String::new() } else { format!(" for key `{}`", e.path.join(".")) };
                let origin = match e.metadata.as_ref().and_then(|m| m.source.as_ref()) {
                    Some(figment::Source::File(p)) => format!(" in {}", p.display()),
                    _ => match &e.metadata {
                        Some(m) if m.name.contains("environment") => " from the environment".to_string(),
                        _ => String::new(),
                    },
                };
                format!("{}{key}{origin}", e.kind)
            })
            .collect();
        CliError::Usage(msgs.join("; "))
    }
}
