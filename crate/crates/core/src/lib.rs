//! Exact conditional maximum likelihood for VAR models with a scalar
//! moving-average polynomial.
//!
//! For a fixed MA polynomial `θ(L)` the AR coefficients, intercept and
//! innovation covariance have closed-form GLS solutions, so only the `q`
//! coefficients of `θ` are optimized numerically.

pub mod cli;
pub mod covariance;
pub mod error;
pub mod gls;
pub mod ma_kernel;
pub mod optimizer;
pub mod simulate;
pub mod stability;
pub mod verify;

pub use error::{Result, VarsmaError};
pub use gls::{GlsFit, ModelSpec, SeriesMatrix};
pub use ma_kernel::ThetaPoly;
