//! Random Batch particle solver for the nonlinear Poisson–Boltzmann equation
//! around a charged cell, with a finite-difference reference solver.

pub mod charge_iteration;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod kernels;
pub mod observables;
pub mod rbm;
pub mod reference;
pub mod sde;

pub use error::{Error, Result};
pub use geometry::{DomainShape, Point, SimDomain};
pub use kernels::PhysicalParams;
pub use rbm::{Dynamics, InitialDistribution, ParticleEnsemble, Simulation, Species};
pub use sde::{ReflectionScheme, RngSpec};
