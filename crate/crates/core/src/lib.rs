//! Discrete Markov probabilistic models on the binary hypercube `{0,1}^d`.
//!
//! The forward process flips every bit independently at rate `λ` (a
//! Poisson clock per coordinate), driving any data law toward the uniform
//! distribution. Its time reversal is a jump process whose rates depend only
//! on a per-coordinate *discrete score*; this crate provides
//!
//! - [`state`]: bit states, product-Bernoulli and dense-table distributions,
//!   the sawtooth dataset,
//! - [`forward`]: transition kernels, exact marginals and path simulation,
//! - [`oracle`]: exact scores and denoisers for enumerable laws,
//! - [`model`]: a small residual MLP denoiser with hand-written gradients,
//!   AdamW and checkpoint I/O,
//! - [`training`]: the L², entropy and cross-entropy objectives and the
//!   training loop,
//! - [`sampler`]: time and flip schedules plus the five backward samplers,
//! - [`analysis`]: divergences, sliced Wasserstein distance, Fisher-like
//!   information, convergence-bound calculators and exact propagation of the
//!   piecewise-constant backward chain.

pub mod analysis;
pub mod error;
pub mod forward;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod state;
pub mod training;

pub use error::{Error, Result};
pub use state::{BitState, DenseTable, Distribution, EmpiricalSet, ProductBernoulli};
