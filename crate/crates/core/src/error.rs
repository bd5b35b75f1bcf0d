use alloc::string::String;

/// Errors raised by the simulation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("level {level} out of range 1..={n_levels}")]
    LevelOutOfRange { level: usize, n_levels: usize },
    #[error("invalid level system: {0}")]
    InvalidSystem(String),
    #[error("invalid detuning model: {0}")]
    InvalidDistribution(String),
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("invalid sequence at line {line}: {message}")]
    Sequence { line: usize, message: String },
    #[error("no rephasing pathway: {0}")]
    NoPathway(String),
    #[error("integrator tolerance not met: step-halving difference {error:e} exceeds {tol:e}")]
    Tolerance { error: f64, tol: f64 },
    #[error("density matrix invariant violated: {0}")]
    Invariant(String),
    #[error("unsupported sampling: {0}")]
    UnsupportedSampling(String),
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error("invalid medium: {0}")]
    InvalidMedium(String),
    #[error("slice integration did not converge: relative change {change:e} under slice doubling")]
    SliceConvergence { change: f64 },
    #[error("no echo above floor {floor:e} (peak {peak:e})")]
    NoEcho { peak: f64, floor: f64 },
    #[error("requested optical depth {requested} unreachable, maximum achievable is {max_achievable}")]
    DepthUnreachable { requested: f64, max_achievable: f64 },
    #[error("sample rate {rate} Hz aliases: need more than {required} Hz")]
    Aliasing { rate: f64, required: f64 },
    #[error("invalid fit input: {0}")]
    FitInput(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid pump schedule: {0}")]
    Pump(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
