//! Solver library for ordinary differential equations coupled with
//! stochastic nonsmooth convex optimization problems: sample-average
//! scenario handling, regularized inner programs, an implicit Euler
//! coupled stepper, Gaussian-process drift estimation, and experiment
//! drivers.

pub mod config;
pub mod csvio;
pub mod error;
pub mod examples;
pub mod gp;
pub mod harness;
pub mod plq;
pub mod problem;
pub mod qp;
pub mod quad;
pub mod stepper;
pub mod scenario;

pub use error::{Error, Result};
