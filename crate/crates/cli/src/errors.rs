//! Error-to-exit-code mapping: 0 success, 2 configuration, 3 input,
//! 4 numerical failure.

use epiflow::geometry::GeometryError;
use epiflow::implicit::ImplicitError;
use epiflow::io::IoError;
use epiflow::losses::LossError;
use epiflow::odometry::OdometryError;
use epiflow::robust::EstimationError;
use epiflow::synth::SynthError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError { code: EXIT_INPUT, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { code: EXIT_NUMERICAL, message: message.into() }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        let code = match e {
            EstimationError::InsufficientData(_) => EXIT_INPUT,
            EstimationError::InvalidConfig(_) => EXIT_CONFIG,
            EstimationError::EstimationFailed(_) => EXIT_NUMERICAL,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<ImplicitError> for CliError {
    fn from(e: ImplicitError) -> Self {
        CliError::numerical(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::numerical(e.to_string())
    }
}

impl From<OdometryError> for CliError {
    fn from(e: OdometryError) -> Self {
        let code = match e {
            OdometryError::CheiralityAmbiguous { .. }
            | OdometryError::TriangulationDegenerate => EXIT_NUMERICAL,
            OdometryError::LengthMismatch { .. }
            | OdometryError::InsufficientTrajectory { .. }
            | OdometryError::EmptyMask => EXIT_INPUT,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        let code = match e {
            LossError::ConfigError(_) => EXIT_CONFIG,
            LossError::EmptyMask => EXIT_INPUT,
            LossError::EpipoleSingularity(_) => EXIT_NUMERICAL,
        };
        CliError { code, message: e.to_string() }
    }
}
