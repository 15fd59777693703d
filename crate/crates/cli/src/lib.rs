//! Library surface of the `tspace` command-line tool.
//!
//! The binary in `main.rs` is a thin argument-parsing shell over these
//! modules; integration tests drive the same code paths directly.

pub mod compare;
pub mod output;
pub mod runs;

use tspace_core::registry::RegistryError;
use tspace_core::sampler::SampleError;
use tspace_core::trainer::TrainError;

/// Command failure with an exit-status class.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad configs, mismatched artifacts: exit 2.
    Usage(String),
    /// Non-finite numerics during training or serialization: exit 3.
    Numeric(String),
    /// Filesystem and storage integrity failures: exit 4.
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Io(m) => m,
        }
    }

    pub fn from_train(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Registry(r) => Self::from_registry(r),
            TrainError::Sample(s) => Self::from_sample(s),
            _ => CliError::Usage(e.to_string()),
        }
    }

    pub fn from_registry(e: RegistryError) -> Self {
        match e {
            RegistryError::Io { .. }
            | RegistryError::Manifest { .. }
            | RegistryError::BlobLength { .. }
            | RegistryError::Checksum { .. } => CliError::Io(e.to_string()),
            RegistryError::NonFiniteWeight { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }

    pub fn from_sample(e: SampleError) -> Self {
        match e {
            SampleError::Registry(r) => Self::from_registry(r),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message())
    }
}

impl std::error::Error for CliError {}
