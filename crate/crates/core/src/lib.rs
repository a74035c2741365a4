//! Hamilton-Jacobi approximation for control-affine optimal control from
//! Koopman principal eigenfunctions.
//!
//! The pipeline: [`system`] defines the plant, cost and Hamiltonian flow;
//! [`galerkin`] approximates principal eigenfunctions from samples over a
//! [`basis`]; [`procedure1`] solves a Riccati equation in eigenfunction
//! coordinates; [`procedure2`] extracts the stable Lagrangian manifold from
//! unstable eigenfunctions of the Hamiltonian system; [`simulate`] runs
//! closed-loop rollouts against LQR.
#![allow(non_snake_case)]
// `!(x < tol)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod error;
pub mod galerkin;
pub mod io;
pub mod procedure1;
pub mod procedure2;
pub mod simulate;
pub mod solution;
pub mod spectral;
pub mod system;

pub use error::{Error, Result};
