//! Variable time-stepping DLN ensemble algorithms for incompressible
//! Navier-Stokes, with the scheme's scalar arithmetic, a generic ODE
//! integrator, the AB2-like adaptive controller, a minimal Taylor-Hood
//! finite-element layer and the experiment harness behind the CLI.

pub mod adaptivity;
pub mod dln;
pub mod ensemble;
pub mod experiments;
pub mod fem;
pub mod ode;

pub use dln::{DlnCoefficients, DlnError, StepPair, Theta};
