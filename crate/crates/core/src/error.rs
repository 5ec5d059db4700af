use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("subsystem count must be at least 1")]
    ZeroSubsystems,
    #[error("parameter `{name}` must be positive and finite, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("parameter `{name}` must be finite, got {value}")]
    NotFinite { name: &'static str, value: f64 },
    #[error("parameter `{name}` has {found} entries, expected {expected}")]
    Length { name: &'static str, expected: usize, found: usize },
}

/// Failures of the shell geometry: the state left the region where the
/// zipping model is defined.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("shell half-angle undefined: arcsine argument {arg} (theta={theta}, l_p={lp})")]
    Domain { theta: f64, lp: f64, arg: f64 },
    #[error("zipped length {raw} m outside [0, {max}] m")]
    ZippedLength { raw: f64, max: f64 },
    #[error("top-film length must be positive, got {lp}")]
    NonPositiveLength { lp: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("subsystem {index}: {source}")]
    Geometry { index: usize, source: GeometryError },
    #[error("state has {found} entries per block, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{0} is not available for this system")]
    Unsupported(&'static str),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("step size underflow at t={t} s (h={h})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("step budget of {max_steps} exhausted at t={t} s")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("non-finite state at t={t} s")]
    NonFinite { t: f64 },
    #[error("implicit stage equations did not converge at t={t} s")]
    NewtonFailure { t: f64 },
    #[error("state left the model's validity region at t={t} s: {source}")]
    Validity { t: f64, source: ModelError },
    #[error("invalid solver settings: {0}")]
    Settings(String),
}

impl SolverError {
    /// True when the failure is a model-validity violation rather than a
    /// numerical breakdown.
    pub fn is_validity(&self) -> bool {
        matches!(self, SolverError::Validity { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("setpoint {h_star} m is unreachable (|h*| must stay below {limit} m)")]
    Unreachable { h_star: f64, limit: f64 },
    #[error("Newton iteration for the equilibrium angle did not converge in {iterations} iterations")]
    NewtonDiverged { iterations: usize },
    #[error("subsystem {index}: no positive squared charge holds the setpoint (Q^2 = {q_squared})")]
    NoChargeRoot { index: usize, q_squared: f64 },
    #[error("input gain vanishes (|R ga|^2 = {norm_sq}); control law undefined")]
    ZeroInputGain { norm_sq: f64 },
    #[error("momentum of subsystem {index} is {value}, below the matching threshold")]
    SingularMomentum { index: usize, value: f64 },
    #[error("invalid gains: {0}")]
    Gains(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("reference series is constant; fitness undefined")]
    ConstantReference,
    #[error("series lengths differ or are shorter than 2 ({reference} vs {simulated})")]
    Length { reference: usize, simulated: usize },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("initial guess must be positive and finite")]
    InitialGuess,
    #[error(transparent)]
    Solver(#[from] SolverError),
}
