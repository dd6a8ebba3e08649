//! Numerical core for discovering sparse hyperelastic constitutive models with
//! quantified parameter uncertainty.
//!
//! The pipeline implemented across the modules is:
//!
//! 1. [`gp`]: independent Gaussian-process posteriors over measured
//!    stress-deformation functions.
//! 2. [`flow`] + [`distill`]: an inverse autoregressive flow over material
//!    parameters, trained by Wasserstein-1 matching of the induced stress
//!    functions against GP posterior samples.
//! 3. [`sobol`]: total-order Sobol' indices used to prune the model library,
//!    followed by re-distillation of the reduced library.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and run
//! management live in the `hyperdisc` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod diffnum;
pub mod distill;
mod error;
pub mod flow;
pub mod gp;
pub mod mechanics;
pub mod metrics;
pub(crate) mod num;
pub mod rng;
pub mod sobol;

pub use error::{Error, Result};
