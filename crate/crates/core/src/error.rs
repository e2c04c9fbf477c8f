use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A model, grid or stopping invariant does not hold.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    /// A user-supplied handle returned a non-finite value.
    #[error("non-finite {quantity} at x = {x:?}, y = {y:?}")]
    Evaluation {
        quantity: &'static str,
        x: Vec<f64>,
        y: Vec<f64>,
    },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error(
        "control fixed point did not converge at node {node} after {iterations} iterations \
         (residual {residual:e})"
    )]
    NonConvergence {
        node: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("dt = {dt} exceeds the CFL bound dt_max = {dt_max}")]
    Cfl { dt: f64, dt_max: f64 },

    /// Raised by a single step when the sup-norm guard trips.
    #[error("blow-up guard tripped at t = {t}: sup norm {sup_norm:e}")]
    BlowUp { t: f64, sup_norm: f64 },

    #[error("sweep member {parameter} failed: {message}")]
    Sweep { parameter: f64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn evaluation(quantity: &'static str, x: &[f64], y: &[f64]) -> Self {
        Error::Evaluation {
            quantity,
            x: x.to_vec(),
            y: y.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
