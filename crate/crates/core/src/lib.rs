//! Numerical laboratory for Wright–Fisher mean field games with common noise.
//!
//! The workspace is organised around a handful of building blocks:
//! simplex geometry and grids ([`simplex`]), problem instances and generic
//! coefficients ([`model`]), Monte Carlo simulation of the forward system
//! ([`sde`]), finite-difference solvers for the linear Kimura equation
//! ([`pde`]) and the master equation ([`master`]), equilibrium verification
//! ([`mfg`]), the reflection coupling apparatus ([`coupling`]) and the
//! finite-population particle system ([`particle`]).

pub mod coupling;
pub mod error;
pub mod io;
pub mod particle;
pub mod master;
pub mod mfg;
pub mod model;
pub mod pde;
pub mod sde;
pub mod rng;
pub mod simplex;

pub use error::{Error, Result};
pub use model::{CostFamily, Feedback, FnFeedback, ModelSpec, ZeroFeedback};
pub use rng::StreamRng;
pub use simplex::{SimplexGrid, SimplexPoint};
