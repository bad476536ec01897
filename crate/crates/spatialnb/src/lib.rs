//! Bayesian estimation for spatial negative binomial count models.
//!
//! The model explains non-negative counts `y_i` observed on `N` spatial units:
//!
//! ```text
//! y_i  ~ NB(r, p_i),          p_i = exp(ψ_i) / (1 + exp(ψ_i)),
//! ψ_i  = M_i'γ + X_i'β_i + φ_i,
//! β_i  ~ Normal(μ, Σ),
//! exp(τW) φ = ε,              ε ~ Normal(0, σ² I),
//! ```
//!
//! with a row-normalised spatial weight matrix `W`, matrix-exponential spatial
//! dependence in the error `φ`, and unit-level random coefficients `β_i`.
//! Pólya-Gamma augmentation turns the NB likelihood into a conditionally
//! Gaussian one, so almost every parameter block has a conjugate update.
//!
//! Two estimators are provided:
//!
//! * [`mcmc`] — a Gibbs sampler with a compound-Poisson update for the
//!   dispersion `r` and an adaptive random-walk Metropolis step for the
//!   spatial association `τ`.
//! * [`infvb`] — an integrated non-factorised variational estimator that
//!   places a discrete grid on `(τ, σ)`, runs conjugate coordinate ascent at
//!   every grid point in parallel, and combines the per-point fits by a
//!   softmax of their conditional evidence lower bounds.
//!
//! [`simgen`] reproduces the synthetic data generating process used for
//! validation, and [`scoring`] implements the log score, Dawid-Sebastiani
//! score and ranked probability score for count predictive distributions.
//! The `spatialnb` binary ties everything into a batch
//! simulate → fit → score → compare pipeline.

pub mod cli;
pub mod crt;
pub mod dist;
pub mod error;
pub mod infvb;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod simgen;
pub mod spatial;

pub use error::{Error, Result};

use std::sync::Once;

static BLAS_INIT: Once = Once::new();

extern "C" {
    fn openblas_set_num_threads(num_threads: std::os::raw::c_int);
}

/// Pin the linked BLAS to a single thread.
///
/// Parallelism in this crate lives at the worker level (chains, grid points),
/// so nested BLAS threading only adds contention and makes run-to-run timing
/// noisy. Called once by every estimator entry point; safe to call repeatedly.
pub fn init_blas_single_thread() {
    BLAS_INIT.call_once(|| unsafe {
        openblas_set_num_threads(1);
    });
}
