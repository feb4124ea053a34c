use thiserror::Error;

/// Errors raised by model construction, solvers, integrators and certificates.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("state and action spaces must be non-empty")]
    EmptySpace,
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("transition row P[{state}][{action}] is not a probability vector (sum {sum}, min entry {min})")]
    NonStochasticRow {
        state: usize,
        action: usize,
        sum: f64,
        min: f64,
    },
    #[error("beta[{state}][{action}] = {value}: beta must have full support")]
    NonFullSupportBeta {
        state: usize,
        action: usize,
        value: f64,
    },
    #[error("beta sums to {sum}, expected 1")]
    BetaNotNormalised { sum: f64 },
    #[error("reference measure mu is invalid: {reason}")]
    BadReferenceMeasure { reason: String },
    #[error("discount gamma = {0} must lie in (0, 1)")]
    BadDiscount(f64),
    #[error("regulariser tau = {0} must be positive")]
    BadRegulariser(f64),
    #[error("cost c[{state}][{action}] is not finite")]
    NonFiniteCost { state: usize, action: usize },
    #[error("logit f[{state}][{action}] is not finite")]
    NonFiniteLogit { state: usize, action: usize },
    #[error("feature row for (s={state}, a={action}) is not finite")]
    NonFiniteFeature { state: usize, action: usize },
    #[error("Gram matrix under beta is singular (lambda_min = {lambda_min:e})")]
    SingularGram { lambda_min: f64 },
    #[error("linear-MDP sampling failed to produce a valid instance after {attempts} attempts")]
    InfeasibleSpec { attempts: usize },
    #[error("linear solve failed: {0}")]
    SolveFailure(String),
    #[error("fixed-point iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("features do not realise Q^pi (residual {residual:e})")]
    NotRealisable { residual: f64 },
    #[error("policy perturbation is not tangent to the simplex (row {state} sums to {sum:e})")]
    NotTangent { state: usize, sum: f64 },
    #[error("timescale schedule invalid: {0}")]
    BadSchedule(String),
    #[error("invalid step sizes at iteration {step}: {reason}")]
    BadStepSizes { step: usize, reason: String },
    #[error("integration parameters invalid: {0}")]
    BadIntegration(String),
    #[error("step of size {dt:e} at t = {t} produced non-finite values")]
    StepSizeTooLarge { t: f64, dt: f64 },
    #[error("blow-up detected at t = {t}: |theta| = {theta_norm:e}, K_t = {kl:e}")]
    BlowupDetected { t: f64, theta_norm: f64, kl: f64 },
    #[error("eta0 = {eta0} does not exceed {threshold} (required for {what})")]
    InadmissibleEta {
        eta0: f64,
        threshold: f64,
        what: &'static str,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
