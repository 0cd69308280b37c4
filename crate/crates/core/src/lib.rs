//! Two-stage Bayesian inference of linear PDE coefficients: a deep-kernel
//! Gaussian process is pretrained with a physics-informed loss, then HMC
//! samples the PDE parameters and kernel hyperparameters under the joint
//! likelihood of state and source observations.

pub mod cli;
pub mod diff;
pub mod error;
pub mod gp;
pub mod hmc;
pub mod kernel;
pub mod nn;
pub mod pde;
pub mod predict;
pub mod pretrain;

pub use error::{Error, Result};
