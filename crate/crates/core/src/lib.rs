//! Perturbed planted models: exact posteriors, quenched averages, MCMC replicas
//! and numerical checks of the Nishimori, overlap and multioverlap identities.

pub mod container;
pub mod error;
pub mod experiment;
pub mod identities;
pub mod likelihood;
pub mod model;
pub mod observables;
pub mod perturbation;
pub mod posterior;
pub mod quadrature;
pub mod quenched;
pub mod rng;

pub use error::{LabError, Result};
