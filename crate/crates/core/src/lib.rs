//! Spectral Galerkin laboratory for the 3D stochastic Navier–Stokes equations
//! on the torus driven by noise that misses finitely many low modes.

pub mod control;
pub mod error;
pub mod field;
pub mod flow;
pub mod hormander;
pub mod modes;
pub mod noise;
pub mod nonlinearity;
pub mod parallel;
pub mod pseudospectral;
pub mod rng;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
pub use field::{SobolevIndex, SpectralField};
pub use modes::{Lattice, ModeIndex, Part, PerpBasis, SignClass, Window};
