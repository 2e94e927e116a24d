//! Numerical laboratory for quadratic drift and recovery phenomena of a
//! scalar-input heat equation on (0, π) with Neumann boundary conditions.
//!
//! The system under study is `∂_t z − ∂_xx z = u(t) Γ[z](x)` expanded in the
//! Neumann cosine basis. For suitable nonlinearities Γ the linearized system
//! loses directions; the second-order expansion then moves the lost modes with
//! a definite sign (a quadratic drift), and carefully synthesized oscillating
//! controls can move them in either direction. This crate provides:
//!
//! * exact piecewise-linear signal calculus in time and frequency ([`signals`]),
//! * trapezoid block profiles and their sparse diagonal families ([`profiles`]),
//! * drift kernels, their Fourier transforms, asymptotic weights and
//!   quadratic forms ([`kernels`]),
//! * spectral nonlinearities (affine and feedback-structured) ([`system`]),
//! * exponential time integrators and drift measurements ([`simulate`]),
//! * moment-problem solvers and null controls ([`moments`]),
//! * oscillating-atom control synthesis and fixed-point recovery ([`synthesis`]).

pub mod error;
pub mod io;
pub mod kernels;
pub mod moments;
pub mod profiles;
pub mod signals;
pub mod simulate;
pub mod synthesis;
pub mod system;

pub use error::{Error, Result};
