//! Classical engine for digital quantum-trajectory simulation of open
//! quantum systems.
//!
//! The crate simulates three related dynamical equations for a system
//! coupled to `M` dissipation channels `(L_mu, gamma_mu, eta_mu)`:
//!
//! * the Lindblad master equation (all `eta = 0`),
//! * its nonlinear extension in which a fraction `eta` of quantum jumps
//!   is removed by postselection, and
//! * the effective non-Hermitian Hamiltonian limit (all `eta = 1`).
//!
//! Dynamics is sampled by stochastic pure-state trajectories whose
//! branch probabilities come from the measurement statistics of a
//! dilation unitary built per channel and time step ([`dilation`]).
//! Exact superoperator solvers ([`exact`]) provide reference solutions
//! for small systems.

pub mod dilation;
pub mod exact;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod observables;
pub mod trajectory;

pub use linalg::{CMat, CVec, C64};
