//! Exact laws of the piecewise-constant backward chain and score-error
//! estimates along it.

use serde::{Deserialize, Serialize};

use super::bounds::{fisher_like_beta, BoundReport};
use super::divergences;
use crate::error::{invalid, Error, Result};
use crate::forward::marginal_table;
use crate::oracle::coordinate_rates;
use crate::rng::stream;
use crate::sampler::{run_piecewise_exact_with, ScoreSource, TimeSchedule};
use crate::state::{BitState, DenseTable};

/// Largest dimension for exact propagation (generators are `2^d × 2^d`).
pub const MAX_EXACT_DIM: usize = 10;

/// Truncation threshold on the Poisson tail mass in uniformization.
const TAIL_MASS: f64 = 1e-14;
/// Largest `Λh` handled in one uniformization pass before splitting.
const MAX_UNIFORMIZED_SPAN: f64 = 30.0;

fn all_states(d: usize) -> Vec<BitState> {
    (0..1u64 << d).map(|i| BitState::new(i, d).expect("dimension checked")).collect()
}

/// `rates[x·d + ℓ] = λ(1 − s^ℓ_t(x))` for every state.
fn rate_table<S: ScoreSource + ?Sized>(src: &S, t: f64, states: &[BitState]) -> Result<Vec<f64>> {
    let scores = src.score_batch(&vec![t; states.len()], states)?;
    let mut out = Vec::with_capacity(states.len() * src.dim());
    for row in scores.rows() {
        out.extend(coordinate_rates(row.as_slice().expect("row-major scores"), src.lambda())?);
    }
    Ok(out)
}

/// `μ ← μ exp(h Q)` for the generator with off-diagonal rates `rates`.
fn propagate(mu: &mut Vec<f64>, rates: &[f64], d: usize, h: f64) {
    let n = mu.len();
    let out_rate: Vec<f64> = rates.chunks_exact(d).map(|r| r.iter().sum()).collect();
    let big = out_rate.iter().fold(0.0, |a: f64, &b| a.max(b));
    if big == 0.0 || h == 0.0 {
        return;
    }
    let pieces = (big * h / MAX_UNIFORMIZED_SPAN).ceil().max(1.0) as usize;
    let span = big * h / pieces as f64;
    let mut term = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for _ in 0..pieces {
        term.copy_from_slice(mu);
        let mut weight = (-span).exp();
        let mut cum = weight;
        acc.iter_mut().zip(&term).for_each(|(a, t)| *a = weight * t);
        let mut k = 0usize;
        // the cap only guards against rounding stalls of the cumulative sum
        let cap = 10 * span.ceil() as usize + 200;
        while 1.0 - cum > TAIL_MASS && k < cap {
            k += 1;
            // one step of the uniformized chain P = I + Q/Λ
            for y in 0..n {
                let mut v = term[y] * (1.0 - out_rate[y] / big);
                for l in 0..d {
                    let z = y ^ (1 << l);
                    v += term[z] * rates[z * d + l] / big;
                }
                next[y] = v;
            }
            std::mem::swap(&mut term, &mut next);
            weight *= span / k as f64;
            cum += weight;
            acc.iter_mut().zip(&term).for_each(|(a, t)| *a += weight * t);
        }
        mu.copy_from_slice(&acc);
    }
}

fn backward_laws<S: ScoreSource + ?Sized>(src: &S, schedule: &TimeSchedule) -> Result<Vec<Vec<f64>>> {
    let d = src.dim();
    if d > MAX_EXACT_DIM {
        return Err(Error::EnumerationLimit { d, limit: MAX_EXACT_DIM });
    }
    if (schedule.t_f - src.horizon()).abs() > 1e-12 * src.horizon() {
        return Err(invalid("schedule horizon differs from the score source horizon"));
    }
    let states = all_states(d);
    let mut mu = vec![1.0 / states.len() as f64; states.len()];
    let mut laws = vec![mu.clone()];
    for (t, dt) in schedule.steps() {
        let rates = rate_table(src, t, &states)?;
        propagate(&mut mu, &rates, d, dt);
        laws.push(mu.clone());
    }
    Ok(laws)
}

/// Exact terminal law of the backward chain started from the uniform law
/// whose rates on `[t_k, t_{k+1})` are those of `src` at `t_k`, computed by
/// uniformization.
pub fn exact_backward_marginal<S: ScoreSource + ?Sized>(src: &S, schedule: &TimeSchedule) -> Result<DenseTable> {
    let law = backward_laws(src, schedule)?.pop().expect("nonempty");
    Ok(DenseTable::from_raw(src.dim(), law))
}

/// Measured `KL(target | exact terminal law)` together with the matching
/// bound. Without early stopping the target is `μ*`; otherwise it is the
/// noised law `μ_η` and the bound uses `β(μ_η)`.
pub fn verify_theorem<S: ScoreSource + ?Sized>(
    src: &S,
    mu_star: &DenseTable,
    schedule: &TimeSchedule,
    eps: f64,
) -> Result<BoundReport> {
    let terminal = exact_backward_marginal(src, schedule)?;
    let kl_init = divergences(mu_star, &DenseTable::uniform(mu_star.dim())?)?.kl;
    let eta = schedule.early_stop_time();
    let mut report = if eta > 0.0 {
        let target = marginal_table(&mu_star.clone().into(), eta, src.lambda())?;
        let mut r =
            BoundReport::early_stop(kl_init, fisher_like_beta(&target)?, schedule.max_step(), eps, schedule.t_f, eta)?;
        r.measured_kl = Some(divergences(&target, &terminal)?.kl);
        r
    } else {
        let mut r = super::theorem_bound(kl_init, fisher_like_beta(mu_star)?, schedule.max_step(), eps, schedule.t_f)?;
        r.measured_kl = Some(divergences(mu_star, &terminal)?.kl);
        r
    };
    report.bound = report.recompute();
    Ok(report)
}

/// `Σ_ℓ (1 − s_θ^ℓ) h((1 − s^ℓ)/(1 − s_θ^ℓ))` for true scores `s` and
/// approximate scores `s_θ`, i.e. `Σ_ℓ a log(a/b) − a + b` with `a = 1 − s`,
/// `b = 1 − s_θ`.
pub fn entropic_error(s_true: &[f64], s_model: &[f64]) -> f64 {
    s_true
        .iter()
        .zip(s_model)
        .map(|(&s, &sm)| {
            let (a, b) = ((1.0 - s).max(0.0), (1.0 - sm).max(0.0));
            match (a > 0.0, b > 0.0) {
                (false, _) => b,
                (true, false) => f64::INFINITY,
                (true, true) => a * (a / b).ln() - a + b,
            }
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub time: f64,
    pub mean: f64,
    pub std_error: f64,
}

/// Per-grid-time expected entropic score error and its maximum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub steps: Vec<StepError>,
    pub max: f64,
    pub max_std_error: f64,
    pub argmax_time: f64,
}

impl EpsilonEstimate {
    fn from_steps(steps: Vec<StepError>) -> Self {
        let best = steps.iter().copied().max_by(|a, b| a.mean.total_cmp(&b.mean)).expect("at least one step");
        Self { max: best.mean, max_std_error: best.std_error, argmax_time: best.time, steps }
    }
}

fn check_pair<A: ScoreSource + ?Sized, B: ScoreSource + ?Sized>(model: &A, oracle: &B) -> Result<()> {
    if model.dim() != oracle.dim() {
        return Err(Error::DimensionMismatch { expected: oracle.dim(), got: model.dim() });
    }
    if model.lambda() != oracle.lambda() || model.horizon() != oracle.horizon() {
        return Err(invalid("model and reference disagree on λ or T_f"));
    }
    Ok(())
}

/// Score error at the grid times `t_k`, `k < K`, averaged over the exact law
/// of the chain driven by `model`.
pub fn epsilon_exact<A, B>(model: &A, oracle: &B, schedule: &TimeSchedule) -> Result<EpsilonEstimate>
where
    A: ScoreSource + ?Sized,
    B: ScoreSource + ?Sized,
{
    check_pair(model, oracle)?;
    let laws = backward_laws(model, schedule)?;
    let states = all_states(model.dim());
    let mut steps = Vec::with_capacity(schedule.steps);
    for ((t, _), law) in schedule.steps().zip(&laws) {
        let times = vec![t; states.len()];
        let sm = model.score_batch(&times, &states)?;
        let so = oracle.score_batch(&times, &states)?;
        let mean = law
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(x, &p)| p * entropic_error(so.row(x).as_slice().unwrap(), sm.row(x).as_slice().unwrap()))
            .sum();
        steps.push(StepError { time: t, mean, std_error: 0.0 });
    }
    Ok(EpsilonEstimate::from_steps(steps))
}

/// Monte-Carlo version of [`epsilon_exact`] over `n` simulated trajectories
/// of the piecewise-constant chain driven by `model`; works in any dimension
/// the reference supports.
pub fn epsilon_monte_carlo<A, B>(
    model: &A,
    oracle: &B,
    schedule: &TimeSchedule,
    n: usize,
    seed: u64,
) -> Result<EpsilonEstimate>
where
    A: ScoreSource + ?Sized,
    B: ScoreSource + ?Sized,
{
    check_pair(model, oracle)?;
    if n < 2 {
        return Err(invalid("need at least two trajectories"));
    }
    let mut rngs: Vec<_> = (0..n as u64).map(|i| stream(seed, "epsilon", i)).collect();
    let mut steps = Vec::with_capacity(schedule.steps);
    run_piecewise_exact_with(model, schedule, &mut rngs, |_, t, states| {
        let times = vec![t; states.len()];
        let sm = model.score_batch(&times, states)?;
        let so = oracle.score_batch(&times, states)?;
        let vals: Vec<f64> = (0..states.len())
            .map(|i| entropic_error(so.row(i).as_slice().unwrap(), sm.row(i).as_slice().unwrap()))
            .collect();
        let nf = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / nf;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        steps.push(StepError { time: t, mean, std_error: (var / nf).sqrt() });
        Ok(())
    })?;
    Ok(EpsilonEstimate::from_steps(steps))
}
