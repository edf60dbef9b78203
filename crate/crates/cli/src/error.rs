//! Error classes and their exit codes.

use gcnfabric::gcn::GcnError;
use gcnfabric::graphprep::GraphError;
use gcnfabric::netsim::SimError;
use gcnfabric::router::{InstructionError, RouteError};
use serde_json::json;
use thiserror::Error;

use crate::workload::WorkloadError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Invariant(_) => "invariant",
        }
    }

    pub fn to_json(&self) -> String {
        json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
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

impl From<WorkloadError> for CliError {
    fn from(e: WorkloadError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RouteError> for CliError {
    fn from(e: RouteError) -> Self {
        match e {
            RouteError::MalformedStart => CliError::Data(e.to_string()),
            _ => CliError::Invariant(e.to_string()),
        }
    }
}

impl From<InstructionError> for CliError {
    fn from(e: InstructionError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ReplayMismatch { .. } | SimError::Route(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GcnError> for CliError {
    fn from(e: GcnError) -> Self {
        match e {
            GcnError::DimensionMismatch { .. } => CliError::Invariant(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<gcnfabric::bench::BenchError> for CliError {
    fn from(e: gcnfabric::bench::BenchError) -> Self {
        match e {
            gcnfabric::bench::BenchError::InvalidFuse(_) => CliError::Usage(e.to_string()),
            gcnfabric::bench::BenchError::Route(r) => r.into(),
        }
    }
}
