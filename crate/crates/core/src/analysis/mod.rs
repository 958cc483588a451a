//! Metrics, convergence bounds and exact references.
//!
//! Total variation follows the unnormalized convention
//! `TV(p, q) = Σ_x |p(x) − q(x)|`, so it ranges over `[0, 2]` (twice the
//! value reported by libraries using the `½ Σ` convention).

mod bounds;
mod exact;
mod swd;

pub use bounds::{
    fisher_like_beta, h_entropy, plan_early_stop, plan_steps, theorem_bound, tv_early_stop_bound, BoundReport,
    EarlyStopPlan, StepPlan,
};
pub use exact::{
    entropic_error, epsilon_exact, epsilon_monte_carlo, exact_backward_marginal, verify_theorem, EpsilonEstimate,
    StepError, MAX_EXACT_DIM,
};
pub use swd::{swd, SwdEstimate, DEFAULT_DIRECTIONS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::state::{check_dim, DenseTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergences {
    /// `KL(p | q)`, `+∞` when `p` charges a `q`-null state.
    pub kl: f64,
    /// `Σ |p − q| ∈ [0, 2]`.
    pub tv: f64,
}

pub fn divergences(p: &DenseTable, q: &DenseTable) -> Result<Divergences> {
    check_dim(p.dim(), q.dim())?;
    let mut kl = 0.0;
    let mut tv = 0.0;
    for (&a, &b) in p.masses().iter().zip(q.masses()) {
        tv += (a - b).abs();
        if a > 0.0 {
            kl += if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY };
        }
    }
    Ok(Divergences { kl, tv })
}

/// Pearson goodness-of-fit statistic of an empirical histogram.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
}

impl ChiSquare {
    /// `statistic ≤ dof + 3 √(2 dof)`: within three standard deviations of
    /// the χ² mean.
    pub fn passes_3sigma(&self) -> bool {
        let dof = self.dof as f64;
        self.statistic <= dof + 3.0 * (2.0 * dof).sqrt()
    }
}

/// χ² statistic of `n` samples with empirical frequencies `observed` against
/// `expected`. States with zero expected mass are dropped from the degrees of
/// freedom; observing one makes the statistic infinite.
pub fn chi_square_gof(observed: &DenseTable, expected: &DenseTable, n: usize) -> Result<ChiSquare> {
    check_dim(observed.dim(), expected.dim())?;
    let n = n as f64;
    let mut statistic = 0.0;
    let mut cells = 0usize;
    for (&o, &e) in observed.masses().iter().zip(expected.masses()) {
        if e > 0.0 {
            cells += 1;
            statistic += n * (o - e).powi(2) / e;
        } else if o > 0.0 {
            statistic = f64::INFINITY;
        }
    }
    Ok(ChiSquare { statistic, dof: cells.saturating_sub(1) })
}

/// A random law of full support: masses drawn from `U[0.05, 1)`, normalized.
pub fn random_full_support<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<DenseTable> {
    crate::state::check_enumerable(d)?;
    let mass: Vec<f64> = (0..1usize << d).map(|_| rng.random_range(0.05..1.0)).collect();
    Ok(DenseTable::normalized(d, mass)?.0)
}
