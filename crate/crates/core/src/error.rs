use thiserror::Error;

use crate::qp::QpSolution;

/// Errors produced across the solver pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: non-finite value from scenario {scenario}: {detail}")]
    Evaluation { scenario: usize, detail: String },

    #[error("inner problem infeasible: {0}")]
    Infeasible(String),

    #[error("QP did not converge within max_iter ({iterations} iterations, primal {primal:.3e}, dual {dual:.3e})")]
    QpMaxIter {
        iterations: usize,
        primal: f64,
        dual: f64,
    },

    #[error("fixed-point iteration failed to converge: final residual {final_residual:.3e} after {iterations} iterations")]
    FixedPoint {
        iterations: usize,
        final_residual: f64,
        residual_history: Vec<f64>,
    },

    #[error("step {index} at t={time}: {source}")]
    Step {
        index: usize,
        time: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("insufficient successful repetitions: {succeeded} of {requested} (need at least {minimum})")]
    InsufficientRepetitions {
        succeeded: usize,
        requested: usize,
        minimum: usize,
    },
}

impl Error {
    pub fn infeasible_with_certificate(diag: &QpSolution) -> Self {
        let cert = diag
            .infeasibility_certificate
            .as_ref()
            .map(|v| format!("{:?}", v.as_slice()))
            .unwrap_or_else(|| "none".to_string());
        Error::Infeasible(format!("primal infeasibility certificate: {cert}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
