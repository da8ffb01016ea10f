//! Blind source separation for longitudinal high-dimensional data.
//!
//! Decomposes a P×F observation matrix into a small number of sources, each
//! the outer product of a monotonic temporal trajectory (random-feature GP)
//! and a sparse multi-scale spatial map (variational-dropout code convolved
//! with a separable 3D Gaussian kernel), plus a static offset and per-sample
//! time-shifts.  Everything is trained jointly by stochastic variational
//! inference on a single ELBO.
//!
//! Module map:
//! - [`tensor`]: dense row-major f64 storage, seeded RNG, MGPT file IO
//! - [`kron`]: Kronecker-separable Gaussian convolution operators
//! - [`temporal`]: random-feature GP sources, derivatives, monotonicity term
//! - [`codes`]: variational-dropout spatial codes and map assembly
//! - [`elbo`]: the five-term bound and its analytic gradients
//! - [`optim`]: Adam ascent, alternation schedule, structural moves, checkpoints
//! - [`synth`]: synthetic benchmark generation, metrics, PCA baseline

pub mod codes;
pub mod elbo;
pub mod error;
pub mod kron;
pub mod optim;
pub mod synth;
pub mod temporal;
pub mod tensor;

pub use error::MgpaError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MgpaError>;
