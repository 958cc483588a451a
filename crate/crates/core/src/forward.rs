//! The forward noising chain.
//!
//! Each coordinate carries its own Poisson clock of rate `λ` and flips when
//! it rings, so the per-bit kernel is
//! `p_t(a, b) = ½ + ½α_t` if `a = b` and `½ − ½α_t` otherwise, with
//! `α_t = e^{−2λt}`, and the `d`-bit kernel is the product of per-bit kernels.
//! Equivalently the whole state jumps at total rate `λd`, flipping a
//! uniformly chosen coordinate at each jump; [`simulate_path`] uses that
//! description.

use rand::Rng;
use rand_distr::{Distribution as _, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::state::{check_dim, check_enumerable, BitState, DenseTable, Distribution, ProductBernoulli};

/// Jump rate and time horizon of the forward chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardParams {
    pub lambda: f64,
    pub t_f: f64,
}

impl ForwardParams {
    pub fn new(lambda: f64, t_f: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(invalid(format!("jump rate must be positive, got {lambda}")));
        }
        if !(t_f > 0.0 && t_f.is_finite()) {
            return Err(invalid(format!("time horizon must be positive, got {t_f}")));
        }
        Ok(Self { lambda, t_f })
    }

    /// Forward time corresponding to backward time `t`.
    pub fn forward_time(&self, t: f64) -> f64 {
        self.t_f - t
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0) {
        return Err(invalid(format!("time must be nonnegative, got {t}")));
    }
    Ok(())
}

/// `α_t = e^{−2λt}`.
pub fn alpha(t: f64, lambda: f64) -> Result<f64> {
    check_time(t)?;
    Ok((-2.0 * lambda * t).exp())
}

/// Single-bit transition probability `p_t(a, b)`.
pub fn kernel1(a: u8, b: u8, t: f64, lambda: f64) -> Result<f64> {
    let al = alpha(t, lambda)?;
    Ok(if a == b { 0.5 + 0.5 * al } else { 0.5 - 0.5 * al })
}

/// Product kernel `p_t(x, y) = ∏_i p_t(x_i, y_i)`.
pub fn kernel(x: &BitState, y: &BitState, t: f64, lambda: f64) -> Result<f64> {
    check_dim(x.dim(), y.dim())?;
    let al = alpha(t, lambda)?;
    let diff = x.hamming(y) as i32;
    let same = x.dim() as i32 - diff;
    Ok((0.5 + 0.5 * al).powi(same) * (0.5 - 0.5 * al).powi(diff))
}

/// Applies the single-bit kernel with stay probability `keep` to every
/// coordinate of `mass` except `skip`, in place.
pub(crate) fn noise_table_in_place(mass: &mut [f64], d: usize, keep: f64, skip: Option<usize>) {
    let flip = 1.0 - keep;
    for i in (0..d).filter(|&i| Some(i) != skip) {
        let step = 1usize << i;
        for x in 0..mass.len() {
            if x & step == 0 {
                let (a, b) = (mass[x], mass[x | step]);
                mass[x] = keep * a + flip * b;
                mass[x | step] = flip * a + keep * b;
            }
        }
    }
}

/// Per-coordinate marginal of a product law after forward time `t`:
/// `P(x_i = 1) = ½ + (p_i − ½)α_t`.
pub fn marginal_product(p: &ProductBernoulli, t: f64, lambda: f64) -> Result<ProductBernoulli> {
    let al = alpha(t, lambda)?;
    ProductBernoulli::new(p.probs().iter().map(|&pi| 0.5 + (pi - 0.5) * al).collect())
}

/// Forward marginal `μ_t(x) = Σ_z μ_0(z) p_t(z, x)` as a dense table.
pub fn marginal_table(mu0: &Distribution, t: f64, lambda: f64) -> Result<DenseTable> {
    check_time(t)?;
    check_enumerable(mu0.dim())?;
    match mu0 {
        Distribution::Product(p) => marginal_product(p, t, lambda)?.to_table(),
        Distribution::Table(table) => {
            let al = alpha(t, lambda)?;
            let mut mass = table.masses().to_vec();
            noise_table_in_place(&mut mass, table.dim(), 0.5 + 0.5 * al, None);
            Ok(DenseTable::from_raw(table.dim(), mass))
        }
    }
}

/// Forward marginal keeping product structure when the input is a product.
pub fn marginal(mu0: &Distribution, t: f64, lambda: f64) -> Result<Distribution> {
    match mu0 {
        Distribution::Product(p) => Ok(Distribution::Product(marginal_product(p, t, lambda)?)),
        Distribution::Table(_) => Ok(Distribution::Table(marginal_table(mu0, t, lambda)?)),
    }
}

/// Draws `X_t | X_0 = x0` by flipping each bit independently with
/// probability `(1 − α_t)/2`.
pub fn sample_conditional<R: Rng + ?Sized>(x0: &BitState, t: f64, lambda: f64, rng: &mut R) -> Result<BitState> {
    let flip_p = 0.5 - 0.5 * alpha(t, lambda)?;
    Ok(flip_each(x0, flip_p, rng))
}

pub(crate) fn flip_each<R: Rng + ?Sized>(x: &BitState, flip_p: f64, rng: &mut R) -> BitState {
    let mut mask = 0u64;
    for i in 0..x.dim() {
        if rng.random::<f64>() < flip_p {
            mask |= 1 << i;
        }
    }
    x.xor_mask(mask)
}

/// A forward trajectory: initial state plus time-ordered single-bit flips.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPath {
    pub x0: BitState,
    pub jump_times: Vec<f64>,
    pub jump_coords: Vec<usize>,
}

impl ForwardPath {
    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// State at time `t` obtained by replaying the flips with time `<= t`.
    pub fn state_at(&self, t: f64) -> BitState {
        self.jump_times
            .iter()
            .zip(&self.jump_coords)
            .take_while(|(&s, _)| s <= t)
            .fold(self.x0, |x, (_, &c)| x.flip_unchecked(c))
    }

    pub fn terminal(&self) -> BitState {
        self.jump_coords.iter().fold(self.x0, |x, &c| x.flip_unchecked(c))
    }
}

/// Simulates the Poisson-clock path on `[0, T_f]`: `N ~ Poisson(λ d T_f)`
/// jump times placed uniformly and sorted, each flipping a uniform coordinate.
pub fn simulate_path<R: Rng + ?Sized>(x0: &BitState, params: &ForwardParams, rng: &mut R) -> Result<ForwardPath> {
    simulate_path_until(x0, params.lambda, params.t_f, rng)
}

/// Same as [`simulate_path`] with an explicit horizon (zero allowed).
pub fn simulate_path_until<R: Rng + ?Sized>(
    x0: &BitState,
    lambda: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<ForwardPath> {
    check_time(horizon)?;
    let d = x0.dim();
    let mean = lambda * d as f64 * horizon;
    let n = if mean > 0.0 {
        let pois = Poisson::new(mean).map_err(|e| invalid(e.to_string()))?;
        pois.sample(rng) as usize
    } else {
        0
    };
    let mut jump_times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * horizon).collect();
    jump_times.sort_by(f64::total_cmp);
    let jump_coords = (0..n).map(|_| rng.random_range(0..d)).collect();
    Ok(ForwardPath { x0: *x0, jump_times, jump_coords })
}
