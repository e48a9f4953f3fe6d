//! Forward simulation, exact discrete sensitivities and sparse optimal control
//! for the viscous Cahn-Hilliard system with a hyperbolic relaxation term
//! `alpha * mu_tt` in the chemical-potential balance.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: box domains with homogeneous Neumann conditions, the mirror
//!   stencil Laplacian and trapezoidal inner products.
//! * [`potentials`]: regular and logarithmic double-well potentials.
//! * [`state`]: the implicit time stepper with per-step Newton solves.
//! * [`sensitivity`]: linearized solver and its exact discrete transpose.
//! * [`control`]: cost, L1 sparsity, projection formula and the proximal
//!   projected-gradient optimizer.
//! * [`asymptotics`]: `alpha -> 0` sweeps.
//! * [`cli`]: configuration parsing and the subcommand runner.

pub mod asymptotics;
pub mod banded;
pub mod cli;
pub mod control;
mod error;
pub mod grid;
pub mod mms;
pub mod potentials;
pub mod rng;
pub mod sensitivity;
pub mod state;

pub use error::{Error, Result};
pub use grid::{Field, Grid};
pub use potentials::{Potential, PotentialKind};
