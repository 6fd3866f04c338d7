//! Signal-propagation theory and finite-width measurements for randomly
//! initialized multilayer perceptrons.
//!
//! The crate has two halves that check each other. The infinite-width side
//! ([`meanfield`], [`critical`]) iterates the kernel and Jacobian recursions
//! and locates critical initializations. The finite-width side ([`ensemble`])
//! draws real networks and measures the same quantities exactly per draw.
//! [`analysis`] fits exponents and correlation lengths to either.
//!
//! ```
//! use critinit::{activations::Activation, critical, meanfield::{Hyper, NormMode}};
//!
//! let points = critical::critical_point(Activation::Erf, NormMode::Vanilla).unwrap();
//! assert!((points[0].sigma_w - (std::f64::consts::PI / 4.0).sqrt()).abs() < 1e-9);
//!
//! let chi = critical::chi_star(Activation::relu(), NormMode::PreLn, Hyper::new(3.0, 1.0), 1.0).unwrap();
//! assert!((chi - 9.0 / 11.0).abs() < 1e-12);
//! ```

pub mod activations;
pub mod analysis;
pub mod critical;
pub mod ensemble;
mod error;
pub mod exec;
pub mod meanfield;
pub mod quadrature;

pub use error::{Error, Result};
