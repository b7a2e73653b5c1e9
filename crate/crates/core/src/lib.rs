//! Nonparametric estimation of a covariance function from repeated
//! observations at fixed points, with penalized least-squares selection over
//! a collection of finite-dimensional basis models.

pub mod basis;
pub mod cli;
pub mod config;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod io;
pub mod linalg;
pub mod selection;
pub mod simlab;

pub use error::{Error, Result};
