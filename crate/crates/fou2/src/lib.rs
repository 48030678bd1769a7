//! Bivariate fractional Ornstein–Uhlenbeck (2fOU) processes.
//!
//! This crate implements the covariance theory of the 2fOU process, the two
//! families of cross-correlation estimators for (ρ, η₁₂) with their
//! limit-theorem normalizations, and the short-time large-deviation
//! machinery (rate function, smile/skew asymptotics) for fractional
//! stochastic volatility option pricing, together with the Monte Carlo and
//! quadrature oracles used to verify them.
//!
//! Layout:
//! * [`quad`] — Gauss–Legendre/Hermite/Laguerre rules and an adaptive
//!   Gauss–Kronrod integrator.
//! * [`linalg`] — blocked Cholesky factorization sized for large stationary
//!   covariance matrices.
//! * [`gaussian_core`] — Hermite polynomials, Gaussian product moments via
//!   the index-set diagram formula, connected-diagram joint cumulants.
//! * [`rng`] — counter-based per-path Gaussian streams.
//! * [`kernels`] — Volterra kernels (fBm / fOU / log-modulated), induced
//!   covariance matrices, exact joint path sampling.
//! * [`model`] — the 2fOU process itself: parameters, stationary
//!   covariances in all representations, joint simulation.
//! * [`estimators`] — first- and second-kind estimators of (ρ, η₁₂),
//!   asymptotic variances, non-central limits, CLT experiment harness.
//! * [`asymptotics`] — LDP rate function via Ritz minimization, energy
//!   expansion, moderate-deviation smile, skew asymptotics.
//! * [`pricer`] — forward-Euler Monte Carlo pricing, Black–Scholes
//!   utilities, implied volatility, smile and skew tables.

pub mod asymptotics;
pub mod estimators;
pub mod gaussian_core;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod pricer;
pub mod quad;
pub mod rng;

pub use kernels::{KernelSpec, PathBundle};
pub use model::{CovMethod, CovProfile, Fou2Params, StatPaths};

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Parameter validation failure (bad ranges, coherence violation, ...).
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    /// An adaptive quadrature did not reach its tolerance.
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
    /// Cholesky failed even after the jitter ladder — the matrix is not a
    /// covariance (or quadrature noise exceeded the ladder).
    #[error("covariance factorization failed after jitter ladder: {0}")]
    Factorization(String),
    /// Dimension / length mismatch between inputs.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// Root bracketing or iteration failure in the implied-vol solver.
    #[error("implied volatility solver: {0}")]
    ImpliedVol(String),
    /// Price outside the static no-arbitrage interval — no implied vol exists.
    #[error("price out of arbitrage bounds: {0}")]
    PriceOutOfRange(String),
    /// Rate-function optimizer failed at every start.
    #[error("optimizer did not converge: {0}")]
    Optimizer(String),
    /// Unsupported parameter regime for the requested operation.
    #[error("unsupported regime: {0}")]
    Unsupported(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
