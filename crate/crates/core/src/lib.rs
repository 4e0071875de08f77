//! Online minibatch regularization-by-denoising for linearized intensity diffraction tomography.
//!
//! The unknown permittivity contrast is a pair of real volumes ([`forward::ContrastVolume`]).
//! Each illumination contributes a quadratic data term ([`fidelity`]); the solvers in
//! [`solver`] combine a full or minibatch gradient with a denoiser ([`denoise`]) and the
//! [`theory`] module checks the resulting iterations against their convergence guarantees.

pub mod error;
pub mod fidelity;
pub mod io;
pub mod forward;
pub mod denoise;
pub mod linalg;
pub mod metrics;
pub mod sim;
pub mod solver;
pub mod tensor;
pub mod theory;

pub use error::{Error, FormatError, Result};
