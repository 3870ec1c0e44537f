use std::fmt;

use rate_alloc::{AllocationError, AnalysisError, ImagingError, KlError, PgmError, SensingError, SimulationError};

pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;
pub const EXIT_INFEASIBLE: u8 = 4;

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { code: EXIT_INTERNAL, message: message.into() }
    }

    pub fn verify(message: impl Into<String>) -> Self {
        Self { code: EXIT_VERIFY, message: message.into() }
    }

    fn with_code(code: u8, err: impl fmt::Display) -> Self {
        Self { code, message: err.to_string() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<PgmError> for CliError {
    fn from(e: PgmError) -> Self {
        Self::with_code(EXIT_INPUT, e)
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        Self::with_code(EXIT_INPUT, e)
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        Self::with_code(EXIT_INPUT, e)
    }
}

impl From<KlError> for CliError {
    fn from(e: KlError) -> Self {
        let code = match e {
            KlError::Infeasible { .. } => EXIT_INFEASIBLE,
            KlError::InvalidProblem(_) | KlError::ObjectiveUndefined { .. } => EXIT_INPUT,
            KlError::IterationCap { .. } => EXIT_INTERNAL,
        };
        Self::with_code(code, e)
    }
}

impl From<AllocationError> for CliError {
    fn from(e: AllocationError) -> Self {
        match e {
            AllocationError::Imaging(inner) => inner.into(),
            AllocationError::Analysis(inner) => inner.into(),
            AllocationError::InvalidRate(_) => Self::with_code(EXIT_INPUT, e),
            AllocationError::Infeasible { .. } => Self::with_code(EXIT_INFEASIBLE, e),
            _ => Self::with_code(EXIT_INTERNAL, e),
        }
    }
}

impl From<SensingError> for CliError {
    fn from(e: SensingError) -> Self {
        match e {
            SensingError::Imaging(inner) => inner.into(),
            SensingError::InvalidBlockSize(_) => Self::with_code(EXIT_INPUT, e),
            _ => Self::with_code(EXIT_INTERNAL, e),
        }
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Imaging(inner) => inner.into(),
            SimulationError::Analysis(inner) => inner.into(),
            SimulationError::Allocation(inner) => inner.into(),
            SimulationError::Solver(inner) => inner.into(),
            SimulationError::Sensing(inner) => inner.into(),
            SimulationError::InvalidRate(_)
            | SimulationError::NoStages
            | SimulationError::FirstStageTooSmall { .. } => Self::with_code(EXIT_INPUT, e),
            _ => Self::with_code(EXIT_INTERNAL, e),
        }
    }
}
