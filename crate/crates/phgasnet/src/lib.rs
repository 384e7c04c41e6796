//! Structure-preserving simulation and model reduction of compressible,
//! non-isothermal gas flow in pipe networks.
//!
//! The library discretizes the one-dimensional Euler equations with friction
//! and heat exchange on each pipe by a mixed P0/P1 finite-element scheme that
//! inherits a port-Hamiltonian structure: a (state-dependent) symmetric
//! positive semi-definite storage operator, a skew-symmetric interconnection
//! operator, and dissipative friction/cooling operators. Pipes are coupled at
//! network nodes through mass-flow and enthalpy ports with Lagrange
//! multipliers, yielding a differential-algebraic system that conserves mass
//! exactly and satisfies a discrete energy balance.
//!
//! On top of the full-order model the crate provides:
//!
//! - Galerkin model reduction with compatibility-preserving bases, so the
//!   reduced models retain the energy balance and exact conservation;
//! - complexity reduction of the nonlinear terms by learned empirical
//!   quadrature rules (non-negative per-element weights), plus a discrete
//!   empirical interpolation baseline for comparison;
//! - diagnostics quantifying trajectory error, projection error, structural
//!   defects, and conservation/dissipation balances;
//! - a command-line interface for running scenarios, building bases,
//!   training quadrature rules, and comparing models.

pub mod diagnostics;
pub mod error;
pub mod gas;
pub mod graph;
pub mod hyper;
pub mod io;
pub mod linsolve;
pub mod mor;
pub mod network;
pub mod nnls;
pub mod pipe;
pub mod signals;
pub mod solver;

pub use error::{Error, Result};
