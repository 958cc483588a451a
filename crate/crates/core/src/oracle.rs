//! Exact discrete scores and denoisers.
//!
//! For backward time `t` the forward time is `τ = T_f − t` and
//!
//! - score: `s^ℓ(x) = 1 − μ_τ(φ^ℓ x) / μ_τ(x)`,
//! - denoiser: `d^ℓ(x) = P(X_0^ℓ ≠ x^ℓ | X_τ = x)`,
//! - the two are related by `s = 2α/(1+α) − 4α d/(1−α²)` with `α = α_τ`.
//!
//! The brute-force routines here sum over the whole state space and serve as
//! ground truth; [`ExactSlice`] computes the same quantities in `O(d 2^d)`
//! (tables) or `O(d)` (product laws) per time for the samplers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::{alpha, kernel, noise_table_in_place};
use crate::state::{check_dim, check_enumerable, BitState, Distribution};

/// Lower bound applied to the forward time wherever `1/(1−α²)` appears.
pub const FORWARD_TIME_GUARD: f64 = 1e-4;

/// Forward time for backward time `t`, clamped below at the guard. The flag
/// is set when clamping happened.
pub fn guarded_forward_time(t: f64, t_f: f64) -> (f64, bool) {
    let tau = t_f - t;
    if tau < FORWARD_TIME_GUARD {
        (FORWARD_TIME_GUARD, true)
    } else {
        (tau, false)
    }
}

/// Coefficients `(2α/(1+α), 4α/(1−α²))` of the score/denoiser affine map at
/// backward time `t`, with the forward-time guard applied.
pub fn score_coefficients(t: f64, lambda: f64, t_f: f64) -> (f64, f64) {
    let (tau, _) = guarded_forward_time(t, t_f);
    let a = (-2.0 * lambda * tau).exp();
    // 1 − α² = −expm1(−4λτ) keeps precision for small τ
    let one_minus_a2 = -(-4.0 * lambda * tau).exp_m1();
    (2.0 * a / (1.0 + a), 4.0 * a / one_minus_a2)
}

/// Regression target `f = 2α/(1+α) − 4α (x_τ − x_0)² / (1−α²)`.
pub fn f_target(t: f64, x0_bit: u8, xt_bit: u8, lambda: f64, t_f: f64) -> f64 {
    let (c1, c2) = score_coefficients(t, lambda, t_f);
    if x0_bit == xt_bit {
        c1
    } else {
        c1 - c2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    /// Backward time.
    pub time: f64,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserVector {
    /// Backward time.
    pub time: f64,
    pub values: Vec<f64>,
}

/// Affine map from denoiser to score.
pub fn score_from_denoiser(dvec: &DenoiserVector, lambda: f64, t_f: f64) -> ScoreVector {
    let (c1, c2) = score_coefficients(dvec.time, lambda, t_f);
    ScoreVector { time: dvec.time, values: dvec.values.iter().map(|&d| c1 - c2 * d).collect() }
}

/// Inverse of [`score_from_denoiser`].
pub fn denoiser_from_score(s: &ScoreVector, lambda: f64, t_f: f64) -> DenoiserVector {
    let (c1, c2) = score_coefficients(s.time, lambda, t_f);
    DenoiserVector { time: s.time, values: s.values.iter().map(|&v| (c1 - v) / c2).collect() }
}

fn forward_time(t: f64, t_f: f64) -> Result<f64> {
    let tau = t_f - t;
    if !(tau >= 0.0) || t < 0.0 {
        return Err(invalid(format!("backward time {t} outside [0, {t_f}]")));
    }
    Ok(tau)
}

fn enumerate_prior(mu0: &Distribution, x: &BitState) -> Result<crate::state::DenseTable> {
    check_dim(mu0.dim(), x.dim())?;
    check_enumerable(mu0.dim())?;
    mu0.to_table()
}

/// Brute-force Bayes: `Σ_z 1{z^ℓ≠x^ℓ} μ_0(z) p_τ(z, x) / μ_τ(x)`.
pub fn exact_denoiser(mu0: &Distribution, t: f64, x: &BitState, lambda: f64, t_f: f64) -> Result<DenoiserVector> {
    let table = enumerate_prior(mu0, x)?;
    let tau = forward_time(t, t_f)?;
    let d = x.dim();
    let mut joint = vec![0.0; d];
    let mut evidence = 0.0;
    for z in table.states() {
        let w = table.prob(&z)? * kernel(&z, x, tau, lambda)?;
        if w == 0.0 {
            continue;
        }
        evidence += w;
        for (l, j) in joint.iter_mut().enumerate() {
            if z.bit(l) != x.bit(l) {
                *j += w;
            }
        }
    }
    if evidence <= 0.0 {
        return Err(Error::UnreachableState { state: x.to_string(), time: tau });
    }
    Ok(DenoiserVector { time: t, values: joint.into_iter().map(|j| j / evidence).collect() })
}

fn marginal_at(table: &crate::state::DenseTable, x: &BitState, tau: f64, lambda: f64) -> Result<f64> {
    table.states().map(|z| Ok(table.prob(&z)? * kernel(&z, x, tau, lambda)?)).sum()
}

/// Ratio form `s^ℓ(x) = 1 − μ_τ(φ^ℓ x)/μ_τ(x)`, by enumeration.
pub fn exact_score(mu0: &Distribution, t: f64, x: &BitState, lambda: f64, t_f: f64) -> Result<ScoreVector> {
    let table = enumerate_prior(mu0, x)?;
    let tau = forward_time(t, t_f)?;
    let here = marginal_at(&table, x, tau, lambda)?;
    if here <= 0.0 {
        return Err(Error::UnreachableState { state: x.to_string(), time: tau });
    }
    let values = (0..x.dim())
        .map(|l| Ok(1.0 - marginal_at(&table, &x.flip_unchecked(l), tau, lambda)? / here))
        .collect::<Result<_>>()?;
    Ok(ScoreVector { time: t, values })
}

/// Conditional-expectation form `E[f(X_0^ℓ, X_τ^ℓ) | X_τ = x]`, by
/// enumeration of the posterior. Uses the unguarded forward time, which must
/// be positive.
pub fn score_conditional_expectation(
    mu0: &Distribution,
    t: f64,
    x: &BitState,
    lambda: f64,
    t_f: f64,
) -> Result<ScoreVector> {
    let table = enumerate_prior(mu0, x)?;
    let tau = forward_time(t, t_f)?;
    if tau <= 0.0 {
        return Err(invalid("conditional-expectation score needs positive forward time"));
    }
    let a = alpha(tau, lambda)?;
    let c1 = 2.0 * a / (1.0 + a);
    let c2 = 4.0 * a / (1.0 - a * a);
    let mut acc = vec![0.0; x.dim()];
    let mut evidence = 0.0;
    for z in table.states() {
        let w = table.prob(&z)? * kernel(&z, x, tau, lambda)?;
        evidence += w;
        for (l, v) in acc.iter_mut().enumerate() {
            let sq = (x.bit(l) as f64 - z.bit(l) as f64).powi(2);
            *v += w * (c1 - c2 * sq);
        }
    }
    if evidence <= 0.0 {
        return Err(Error::UnreachableState { state: x.to_string(), time: tau });
    }
    Ok(ScoreVector { time: t, values: acc.into_iter().map(|v| v / evidence).collect() })
}

/// Total backward jump rate and the normalized flip distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardRates {
    pub total_rate: f64,
    /// `None` when the total rate is zero: the chain must not jump.
    pub flip_weights: Option<Vec<f64>>,
}

/// Tolerance below zero accepted for `1 − s` before declaring the score invalid.
pub const RATE_TOL: f64 = 1e-9;

/// Per-coordinate rates `λ(1 − s^ℓ)`, clipping tiny negatives to zero.
pub fn coordinate_rates(scores: &[f64], lambda: f64) -> Result<Vec<f64>> {
    scores
        .iter()
        .enumerate()
        .map(|(coord, &s)| {
            let r = 1.0 - s;
            if !(r >= -RATE_TOL) || !r.is_finite() {
                return Err(Error::InvalidScore { coord, value: r });
            }
            Ok(lambda * r.max(0.0))
        })
        .collect()
}

/// `λ̄ = λ Σ_ℓ (1 − s^ℓ)` and `k^ℓ = λ(1 − s^ℓ)/λ̄`.
pub fn backward_rates(s: &ScoreVector, lambda: f64) -> Result<BackwardRates> {
    let rates = coordinate_rates(&s.values, lambda)?;
    let total_rate: f64 = rates.iter().sum();
    let flip_weights = (total_rate > 0.0).then(|| rates.iter().map(|r| r / total_rate).collect());
    Ok(BackwardRates { total_rate, flip_weights })
}

/// Exact score and denoiser evaluation at one backward time.
pub enum ExactSlice {
    Product {
        time: f64,
        /// `P(X_0^ℓ = 1)`
        prior: Vec<f64>,
        /// `P(X_τ^ℓ = 1)`
        noised: Vec<f64>,
        flip_prob: f64,
    },
    Table {
        time: f64,
        d: usize,
        flip_prob: f64,
        marginal: Vec<f64>,
        /// `partial[ℓ]`: prior noised on every coordinate except `ℓ`.
        partial: Vec<Vec<f64>>,
    },
}

impl ExactSlice {
    /// Precomputes the slice at backward time `t`. `with_denoiser` controls
    /// whether the per-coordinate partial tables are built.
    pub fn new(mu0: &Distribution, t: f64, lambda: f64, t_f: f64, with_denoiser: bool) -> Result<Self> {
        let tau = forward_time(t, t_f)?;
        let a = alpha(tau, lambda)?;
        let flip_prob = 0.5 - 0.5 * a;
        match mu0 {
            Distribution::Product(p) => {
                let prior = p.probs().to_vec();
                let noised = prior.iter().map(|&q| 0.5 + (q - 0.5) * a).collect();
                Ok(ExactSlice::Product { time: t, prior, noised, flip_prob })
            }
            Distribution::Table(table) => {
                let d = table.dim();
                let mut marginal = table.masses().to_vec();
                noise_table_in_place(&mut marginal, d, 1.0 - flip_prob, None);
                let partial = if with_denoiser {
                    (0..d)
                        .map(|l| {
                            let mut m = table.masses().to_vec();
                            noise_table_in_place(&mut m, d, 1.0 - flip_prob, Some(l));
                            m
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                Ok(ExactSlice::Table { time: t, d, flip_prob, marginal, partial })
            }
        }
    }

    fn time(&self) -> f64 {
        match self {
            ExactSlice::Product { time, .. } | ExactSlice::Table { time, .. } => *time,
        }
    }

    fn unreachable(&self, x: &BitState) -> Error {
        Error::UnreachableState { state: x.to_string(), time: self.time() }
    }

    /// Writes `s^ℓ(x)` for every coordinate into `out`.
    pub fn score_into(&self, x: &BitState, out: &mut [f64]) -> Result<()> {
        match self {
            ExactSlice::Product { noised, .. } => {
                for (l, o) in out.iter_mut().enumerate() {
                    let q1 = noised[l];
                    let (here, there) = if x.bit(l) == 1 { (q1, 1.0 - q1) } else { (1.0 - q1, q1) };
                    *o = 1.0 - there / here;
                }
            }
            ExactSlice::Table { marginal, .. } => {
                let here = marginal[x.index() as usize];
                if here <= 0.0 {
                    return Err(self.unreachable(x));
                }
                for (l, o) in out.iter_mut().enumerate() {
                    *o = 1.0 - marginal[x.flip_unchecked(l).index() as usize] / here;
                }
            }
        }
        Ok(())
    }

    /// Writes `d^ℓ(x)` for every coordinate into `out`.
    pub fn denoiser_into(&self, x: &BitState, out: &mut [f64]) -> Result<()> {
        match self {
            ExactSlice::Product { prior, noised, flip_prob, .. } => {
                for (l, o) in out.iter_mut().enumerate() {
                    let (p_other, q_here) =
                        if x.bit(l) == 1 { (1.0 - prior[l], noised[l]) } else { (prior[l], 1.0 - noised[l]) };
                    *o = p_other * flip_prob / q_here;
                }
            }
            ExactSlice::Table { marginal, partial, flip_prob, d, .. } => {
                if partial.len() != *d {
                    return Err(invalid("slice was built without denoiser tables"));
                }
                let here = marginal[x.index() as usize];
                if here <= 0.0 {
                    return Err(self.unreachable(x));
                }
                for (l, o) in out.iter_mut().enumerate() {
                    *o = flip_prob * partial[l][x.flip_unchecked(l).index() as usize] / here;
                }
            }
        }
        Ok(())
    }
}
