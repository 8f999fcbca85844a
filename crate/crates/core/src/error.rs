use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, mapped to process exit codes by the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    PostProcessing,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("reduced detuning undefined: reference species has zero decoherence rate")]
    DegenerateDetuning,

    #[error("degenerate medium: {0}")]
    DegenerateMedium(String),

    #[error("derivative unreliable at omega = {omega:.6e} rad/s: {reason}")]
    DerivativeUnreliable { omega: f64, reason: String },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("integrator instability in slab cell {cell} (species {species}) at step {step}: {detail}")]
    IntegratorInstability {
        cell: usize,
        species: usize,
        step: u64,
        detail: String,
    },

    #[error("simulation diverged at step {step}: non-finite field")]
    Diverged { step: u64 },

    #[error("recording not decayed: trailing samples carry {tail_fraction:.3e} of the energy (run longer)")]
    Truncated { tail_fraction: f64 },

    #[error("source band mismatch: no frequency passes the band mask")]
    SourceBandMismatch,

    #[error("probe recordings are incompatible: {0}")]
    IncompatibleRuns(String),

    #[error("fit failed: {reason} (relative residual {residual:.3e})")]
    FitFailed { reason: String, residual: f64 },

    #[error("no transparency window between the resonances")]
    NoTransparency,

    #[error("opaque medium: transmitted energy fraction {fraction:.3e} below threshold")]
    OpaqueMedium { fraction: f64 },

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("unknown preset `{name}`; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter { .. }
            | Error::DegenerateMedium(_)
            | Error::Grid(_)
            | Error::Config { .. }
            | Error::UnknownPreset { .. }
            | Error::DegenerateDetuning => ErrorClass::Config,
            Error::IntegratorInstability { .. } | Error::Diverged { .. } => ErrorClass::Numerical,
            Error::DerivativeUnreliable { .. }
            | Error::Truncated { .. }
            | Error::SourceBandMismatch
            | Error::IncompatibleRuns(_)
            | Error::FitFailed { .. }
            | Error::NoTransparency
            | Error::OpaqueMedium { .. } => ErrorClass::PostProcessing,
            Error::Checkpoint(_) | Error::Io(_) => ErrorClass::Io,
        }
    }
}
