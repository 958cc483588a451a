//! Backward samplers. Every routine advances a batch of independent chains in
//! lockstep, one random stream per chain, so results do not depend on how
//! chains are grouped.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution as _, Exp1};

use super::schedule::{FlipSchedule, TimeSchedule};
use super::source::ScoreSource;
use crate::error::{invalid, Error, Result};
use crate::forward::sample_conditional;
use crate::oracle::coordinate_rates;
use crate::state::BitState;

/// Default micro-step of the continuous-time samplers as a fraction of `T_f`.
pub const MICRO_STEP_FRACTION: f64 = 1e-3;

/// Rounding slack accepted on denoiser probabilities.
const PROB_TOL: f64 = 1e-9;

fn exp1<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Exp1.sample(rng)
}

fn uniform_start<R: Rng>(d: usize, rngs: &mut [R]) -> Result<Vec<BitState>> {
    rngs.iter_mut()
        .map(|rng| {
            let bits = if d == 64 { rng.random::<u64>() } else { rng.random_range(0..1u64 << d) };
            BitState::new(bits, d)
        })
        .collect()
}

/// Categorical draw proportional to nonnegative `weights` (not necessarily
/// normalized). Returns `None` if all weights vanish.
fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Some(i);
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

/// Sequential weighted sampling without replacement: draw, remove,
/// renormalize. Stops early if the remaining weight vanishes.
fn weighted_without_replacement<R: Rng + ?Sized>(weights: &[f64], m: usize, rng: &mut R) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(m);
    for _ in 0..m {
        match categorical(&w, rng) {
            Some(i) => {
                picked.push(i);
                w[i] = 0.0;
            }
            None => break,
        }
    }
    picked
}

fn rates_row(scores: &Array2<f64>, i: usize, lambda: f64, time: f64) -> Result<Vec<f64>> {
    let row = scores.row(i);
    let rates = coordinate_rates(row.as_slice().expect("row-major scores"), lambda)?;
    if rates.iter().any(|r| !r.is_finite()) {
        return Err(Error::Sampler { time, reason: "non-finite jump rate".into() });
    }
    Ok(rates)
}

fn check_source<S: ScoreSource + ?Sized>(src: &S) -> Result<()> {
    if src.dim() == 0 {
        return Err(invalid("score source has dimension zero"));
    }
    Ok(())
}

fn check_schedule<S: ScoreSource + ?Sized>(src: &S, schedule: &TimeSchedule) -> Result<()> {
    check_source(src)?;
    if (schedule.t_f - src.horizon()).abs() > 1e-12 * src.horizon() {
        return Err(invalid(format!(
            "schedule horizon {} differs from the score source horizon {}",
            schedule.t_f,
            src.horizon()
        )));
    }
    Ok(())
}

fn as_sampler_error(time: f64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidScore { coord, value } => {
            Error::Sampler { time, reason: format!("invalid score at coordinate {coord}: 1 − s = {value}") }
        }
        other => other,
    }
}

fn micro_grid(t_f: f64, micro_step: Option<f64>) -> Result<Vec<f64>> {
    let h = micro_step.unwrap_or(MICRO_STEP_FRACTION * t_f);
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("micro-step must be positive, got {h}")));
    }
    let n = (t_f / h).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..=n).map(|j| t_f * j as f64 / n as f64).collect();
    grid[n] = t_f;
    Ok(grid)
}

/// Continuous-time simulation with a single exponential clock on the total
/// rate `λ Σ_ℓ (1 − s^ℓ)`. The rate integral is accumulated on a fixed
/// micro-grid (midpoint rule; a jump restarts the current micro-step at the
/// jump time) and the crossing time is located by linear interpolation. The
/// jumping coordinate is drawn from the rates at the crossing time.
pub fn run_continuous<S, R>(src: &S, rngs: &mut [R], micro_step: Option<f64>) -> Result<Vec<BitState>>
where
    S: ScoreSource + ?Sized,
    R: Rng,
{
    Ok(run_continuous_counted(src, rngs, micro_step)?.0)
}

/// [`run_continuous`] also returning the number of jumps of every chain.
pub fn run_continuous_counted<S, R>(
    src: &S,
    rngs: &mut [R],
    micro_step: Option<f64>,
) -> Result<(Vec<BitState>, Vec<u64>)>
where
    S: ScoreSource + ?Sized,
    R: Rng,
{
    check_source(src)?;
    let (d, lambda) = (src.dim(), src.lambda());
    let grid = micro_grid(src.horizon(), micro_step)?;
    let n = rngs.len();
    let mut x = uniform_start(d, rngs)?;
    let mut clock: Vec<f64> = rngs.iter_mut().map(|r| exp1(r)).collect();
    let mut acc = vec![0.0; n];
    let mut now = vec![0.0; n];
    let mut jumps = vec![0u64; n];
    for w in grid.windows(2) {
        let b = w[1];
        let mut active: Vec<usize> = (0..n).collect();
        while !active.is_empty() {
            let times: Vec<f64> = active.iter().map(|&i| 0.5 * (now[i] + b)).collect();
            let states: Vec<BitState> = active.iter().map(|&i| x[i]).collect();
            let scores = src.score_batch(&times, &states)?;
            let mut crossing = Vec::new();
            for (r, &i) in active.iter().enumerate() {
                let rate: f64 =
                    rates_row(&scores, r, lambda, times[r]).map_err(as_sampler_error(times[r]))?.iter().sum();
                let inc = rate * (b - now[i]);
                if rate > 0.0 && acc[i] + inc >= clock[i] {
                    let t_jump = now[i] + (clock[i] - acc[i]) / rate;
                    crossing.push((i, t_jump.min(b)));
                } else {
                    acc[i] += inc;
                    now[i] = b;
                }
            }
            // the last micro-step ends at T_f, so crossings there never jump
            crossing.retain(|&(_, t)| t < grid[grid.len() - 1]);
            if crossing.is_empty() {
                break;
            }
            let times: Vec<f64> = crossing.iter().map(|c| c.1).collect();
            let states: Vec<BitState> = crossing.iter().map(|c| x[c.0]).collect();
            let scores = src.score_batch(&times, &states)?;
            for (r, &(i, t)) in crossing.iter().enumerate() {
                let rates = rates_row(&scores, r, lambda, t).map_err(as_sampler_error(t))?;
                if let Some(l) = categorical(&rates, &mut rngs[i]) {
                    x[i] = x[i].flip_unchecked(l);
                    jumps[i] += 1;
                }
                acc[i] = 0.0;
                clock[i] = exp1(&mut rngs[i]);
                now[i] = t;
            }
            active = crossing.into_iter().map(|c| c.0).collect();
        }
    }
    Ok((x, jumps))
}

/// Continuous-time simulation with one exponential clock per coordinate;
/// the earliest crossing coordinate jumps and every clock is redrawn.
/// Integration as in [`run_continuous`].
pub fn run_percoord<S, R>(src: &S, rngs: &mut [R], micro_step: Option<f64>) -> Result<Vec<BitState>>
where
    S: ScoreSource + ?Sized,
    R: Rng,
{
    check_source(src)?;
    let (d, lambda) = (src.dim(), src.lambda());
    let grid = micro_grid(src.horizon(), micro_step)?;
    let t_end = grid[grid.len() - 1];
    let n = rngs.len();
    let mut x = uniform_start(d, rngs)?;
    let mut clocks: Vec<Vec<f64>> = rngs.iter_mut().map(|r| (0..d).map(|_| exp1(r)).collect()).collect();
    let mut acc = vec![vec![0.0; d]; n];
    let mut now = vec![0.0; n];
    for w in grid.windows(2) {
        let b = w[1];
        let mut active: Vec<usize> = (0..n).collect();
        while !active.is_empty() {
            let times: Vec<f64> = active.iter().map(|&i| 0.5 * (now[i] + b)).collect();
            let states: Vec<BitState> = active.iter().map(|&i| x[i]).collect();
            let scores = src.score_batch(&times, &states)?;
            let mut next = Vec::new();
            for (r, &i) in active.iter().enumerate() {
                let rates = rates_row(&scores, r, lambda, times[r]).map_err(as_sampler_error(times[r]))?;
                let span = b - now[i];
                let mut first: Option<(usize, f64)> = None;
                for (j, &rate) in rates.iter().enumerate() {
                    if rate > 0.0 && acc[i][j] + rate * span >= clocks[i][j] {
                        let t = (now[i] + (clocks[i][j] - acc[i][j]) / rate).min(b);
                        if first.is_none_or(|(_, best)| t < best) {
                            first = Some((j, t));
                        }
                    }
                }
                match first {
                    Some((j, t)) if t < t_end => {
                        x[i] = x[i].flip_unchecked(j);
                        now[i] = t;
                        acc[i].iter_mut().for_each(|a| *a = 0.0);
                        for c in clocks[i].iter_mut() {
                            *c = exp1(&mut rngs[i]);
                        }
                        next.push(i);
                    }
                    _ => {
                        for (a, &rate) in acc[i].iter_mut().zip(&rates) {
                            *a += rate * span;
                        }
                        now[i] = b;
                    }
                }
            }
            active = next;
        }
    }
    Ok(x)
}

/// Piecewise-constant sampler with flip counts: on each grid step the total
/// rate at `t_k` is added to an accumulator; once the accumulator exceeds an
/// exponential threshold, `m_k` distinct coordinates drawn by weighted
/// sampling without replacement are flipped, and the accumulator and
/// threshold are reset. With all counts equal to one this is the plain
/// one-flip-per-crossing sampler.
pub fn run_flip_schedule<S, R>(
    src: &S,
    schedule: &TimeSchedule,
    flips: &FlipSchedule,
    rngs: &mut [R],
) -> Result<Vec<BitState>>
where
    S: ScoreSource + ?Sized,
    R: Rng,
{
    check_schedule(src, schedule)?;
    if flips.counts.len() != schedule.steps {
        return Err(invalid(format!("{} flip counts for {} steps", flips.counts.len(), schedule.steps)));
    }
    let (d, lambda) = (src.dim(), src.lambda());
    if let Some(m) = flips.counts.iter().find(|&&m| m > d) {
        log::warn!("flip count {m} exceeds dimension {d}; clamped");
    }
    let n = rngs.len();
    let mut x = uniform_start(d, rngs)?;
    let mut clock: Vec<f64> = rngs.iter_mut().map(|r| exp1(r)).collect();
    let mut acc = vec![0.0; n];
    for ((t, dt), &m) in schedule.steps().zip(&flips.counts) {
        let m = m.min(d);
        let scores = src.score_batch(&vec![t; n], &x)?;
        for i in 0..n {
            let rates = rates_row(&scores, i, lambda, t)?;
            acc[i] += rates.iter().sum::<f64>() * dt;
            if acc[i] > clock[i] {
                for l in weighted_without_replacement(&rates, m, &mut rngs[i]) {
                    x[i] = x[i].flip_unchecked(l);
                }
                acc[i] = 0.0;
                clock[i] = exp1(&mut rngs[i]);
            }
        }
    }
    Ok(x)
}

/// [`run_flip_schedule`] with one flip per crossing.
pub fn run_discretized<S, R>(src: &S, schedule: &TimeSchedule, rngs: &mut [R]) -> Result<Vec<BitState>>
where
    S: ScoreSource + ?Sized,
    R: Rng,
{
    run_flip_schedule(src, schedule, &FlipSchedule::uniform(1, schedule.steps), rngs)
}

/// Exact simulation of the piecewise-constant backward chain whose rates on
/// `[t_k, t_{k+1})` are frozen at `t_k` (but follow the current state).
/// Unlike [`run_discretized`], any number of jumps may occur per step.
pub fn run_piecewise_exact<S, R>(src: &S, schedule: &TimeSchedule, rngs: &mut [R]) -> Result<Vec<BitState>>
where
    S: ScoreSource + ?Sized,
    R: Rng,
{
    run_piecewise_exact_with(src, schedule, rngs, |_, _, _| Ok(()))
}

/// [`run_piecewise_exact`] calling `visit(k, t_k, states)` on the states at
/// every grid time `t_k`, `k < K`, before the step is taken.
pub fn run_piecewise_exact_with<S, R, F>(
    src: &S,
    schedule: &TimeSchedule,
    rngs: &mut [R],
    mut visit: F,
) -> Result<Vec<BitState>>
where
    S: ScoreSource + ?Sized,
    R: Rng,
    F: FnMut(usize, f64, &[BitState]) -> Result<()>,
{
    check_schedule(src, schedule)?;
    let (d, lambda) = (src.dim(), src.lambda());
    let n = rngs.len();
    let mut x = uniform_start(d, rngs)?;
    for (k, (t, dt)) in schedule.steps().enumerate() {
        visit(k, t, &x)?;
        let mut remaining = vec![dt; n];
        let mut active: Vec<usize> = (0..n).collect();
        while !active.is_empty() {
            let states: Vec<BitState> = active.iter().map(|&i| x[i]).collect();
            let scores = src.score_batch(&vec![t; active.len()], &states)?;
            let mut next = Vec::new();
            for (r, &i) in active.iter().enumerate() {
                let rates = rates_row(&scores, r, lambda, t)?;
                let total: f64 = rates.iter().sum();
                if !(total > 0.0) {
                    continue;
                }
                let wait = exp1(&mut rngs[i]) / total;
                if wait >= remaining[i] {
                    continue;
                }
                remaining[i] -= wait;
                if let Some(l) = categorical(&rates, &mut rngs[i]) {
                    x[i] = x[i].flip_unchecked(l);
                }
                next.push(i);
            }
            active = next;
        }
    }
    Ok(x)
}

/// Denoise/renoise cycling: at `t_k` flip each bit with the predicted
/// probability `d^ℓ_{t_k}(x)` to reach a data-space guess, then renoise the
/// guess forward to backward time `t_{k+1}`. Returns the last guess.
pub fn run_denoise_renoise<S, R>(src: &S, schedule: &TimeSchedule, rngs: &mut [R]) -> Result<Vec<BitState>>
where
    S: ScoreSource + ?Sized,
    R: Rng,
{
    check_schedule(src, schedule)?;
    let (d, lambda, t_f) = (src.dim(), src.lambda(), src.horizon());
    let n = rngs.len();
    let mut x = uniform_start(d, rngs)?;
    let mut guess = x.clone();
    for (k, (t, dt)) in schedule.steps().enumerate() {
        let probs = src.denoiser_batch(&vec![t; n], &x)?;
        let last = k + 1 == schedule.steps;
        for i in 0..n {
            let mut mask = 0u64;
            for l in 0..d {
                let p = probs[[i, l]];
                if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) {
                    return Err(Error::Sampler { time: t, reason: format!("denoiser value {p} outside [0, 1]") });
                }
                if rngs[i].random::<f64>() < p {
                    mask |= 1 << l;
                }
            }
            guess[i] = BitState::new(x[i].index() ^ mask, d)?;
            if !last {
                x[i] = sample_conditional(&guess[i], t_f - (t + dt), lambda, &mut rngs[i])?;
            }
        }
    }
    Ok(guess)
}

#[cfg(test)]
mod tests;
