use etm::corpus::CorpusError;
use etm::embeddings::EmbeddingError;
use etm::etm::EtmError;
use etm::metrics::MetricsError;
use etm::tensorcore::TensorError;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    /// One-line JSON for standard error.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            error: &'a str,
            code: i32,
            message: String,
        }
        serde_json::to_string(&Line {
            error: self.kind(),
            code: self.exit_code(),
            message: self.to_string(),
        })
        .expect("error line serializes")
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::InvalidArgument(_) | EmbeddingError::UnknownTerm(_) => CliError::Config(e.to_string()),
            EmbeddingError::Tensor(TensorError::NonFinite { .. }) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EtmError> for CliError {
    fn from(e: EtmError) -> Self {
        match e {
            EtmError::InvalidConfig(_) => CliError::Config(e.to_string()),
            EtmError::NonFinite { .. } | EtmError::Tensor(TensorError::NonFinite { .. }) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
