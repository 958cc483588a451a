//! Time grids and flip-count schedules for the discretized samplers.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Quadratic,
    Cosine,
}

impl ScheduleKind {
    /// Fraction of the horizon reached after a fraction `u ∈ [0,1]` of the steps.
    fn profile(self, u: f64) -> f64 {
        match self {
            ScheduleKind::Linear => u,
            ScheduleKind::Quadratic => u * u,
            ScheduleKind::Cosine => ((1.0 - u) * FRAC_PI_2).cos(),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Quadratic => "quadratic",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "quadratic" => Ok(ScheduleKind::Quadratic),
            "cosine" => Ok(ScheduleKind::Cosine),
            _ => Err(invalid(format!("unknown time schedule {s:?}"))),
        }
    }
}

/// Backward-time grid `0 = t_0 < … < t_K`. Normally `t_K = T_f`; with early
/// stopping at `η` the grid ends at `T_f − η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub t_f: f64,
    pub grid: Vec<f64>,
}

impl TimeSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, t_f: f64) -> Result<Self> {
        Self::early_stop(kind, steps, t_f, 0.0)
    }

    /// Grid of the given shape on `[0, T_f − η]`.
    pub fn early_stop(kind: ScheduleKind, steps: usize, t_f: f64, eta: f64) -> Result<Self> {
        if steps < 1 {
            return Err(invalid("a time schedule needs at least one step"));
        }
        if !(t_f > 0.0 && t_f.is_finite()) {
            return Err(invalid(format!("horizon must be positive and finite, got {t_f}")));
        }
        if !(0.0..t_f).contains(&eta) {
            return Err(invalid(format!("early-stop time must lie in [0, T_f), got {eta}")));
        }
        let end = t_f - eta;
        let mut grid: Vec<f64> = (0..=steps).map(|k| end * kind.profile(k as f64 / steps as f64)).collect();
        grid[0] = 0.0;
        grid[steps] = end;
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid(format!(
                "{kind} grid with {steps} steps is not strictly increasing in floating point"
            )));
        }
        Ok(Self { kind, steps, t_f, grid })
    }

    /// Last grid time (`T_f` unless early stopping).
    pub fn end(&self) -> f64 {
        self.grid[self.steps]
    }

    pub fn early_stop_time(&self) -> f64 {
        self.t_f - self.end()
    }

    /// Largest step `max_k (t_{k+1} − t_k)`.
    pub fn max_step(&self) -> f64 {
        self.grid.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.grid.windows(2).map(|w| (w[0], w[1] - w[0]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipKind {
    Constant,
    Linear,
}

impl FromStr for FlipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(FlipKind::Constant),
            "linear" => Ok(FlipKind::Linear),
            _ => Err(invalid(format!("unknown flip schedule {s:?}"))),
        }
    }
}

/// Number of coordinates flipped at each clock crossing. `counts[k]` applies
/// to the step `[t_k, t_{k+1})` and is the count attached to `t_{k+1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipSchedule {
    pub kind: FlipKind,
    pub counts: Vec<usize>,
    pub total: usize,
}

impl FlipSchedule {
    /// Constant: counts as equal as possible; linear: proportional to `t_k`
    /// for `k = 1..K`. Both are rounded by largest remainder so that the
    /// counts sum to `total` exactly.
    pub fn new(kind: FlipKind, schedule: &TimeSchedule, total: usize) -> Self {
        let weights: Vec<f64> = match kind {
            FlipKind::Constant => vec![1.0; schedule.steps],
            FlipKind::Linear => schedule.grid[1..].to_vec(),
        };
        Self { kind, counts: largest_remainder(&weights, total), total }
    }

    /// All counts equal to `m`.
    pub fn uniform(m: usize, steps: usize) -> Self {
        Self { kind: FlipKind::Constant, counts: vec![m; steps], total: m * steps }
    }
}

/// Integer apportionment of `total` proportional to `weights`; ties in the
/// fractional parts go to the lower index.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn grid_endpoints_and_values() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Quadratic, ScheduleKind::Cosine] {
            let s = TimeSchedule::new(kind, 7, 3.0).unwrap();
            assert_eq!(s.grid[0], 0.0);
            assert_eq!(s.grid[7], 3.0);
        }
        let c = TimeSchedule::new(ScheduleKind::Cosine, 2, 3.0).unwrap();
        assert!((c.grid[1] - 2.121320343559642).abs() < 1e-12);
        let lin = TimeSchedule::new(ScheduleKind::Linear, 10, 2.0).unwrap();
        let quad = TimeSchedule::new(ScheduleKind::Quadratic, 10, 2.0).unwrap();
        assert!(quad.grid.iter().zip(&lin.grid).all(|(q, l)| q <= l));
        assert!((lin.max_step() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn grid_errors_and_early_stop() {
        assert!(TimeSchedule::new(ScheduleKind::Linear, 0, 3.0).is_err());
        assert!(TimeSchedule::new(ScheduleKind::Linear, 3, 0.0).is_err());
        assert!(TimeSchedule::early_stop(ScheduleKind::Linear, 3, 1.0, 1.0).is_err());
        let s = TimeSchedule::early_stop(ScheduleKind::Cosine, 5, 3.0, 0.1).unwrap();
        assert_eq!(s.end(), 2.9);
        assert!((s.early_stop_time() - 0.1).abs() < 1e-15);
        assert!(s.grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn flip_count_examples() {
        let s4 = TimeSchedule::new(ScheduleKind::Linear, 4, 3.0).unwrap();
        assert_eq!(FlipSchedule::new(FlipKind::Constant, &s4, 8).counts, vec![2, 2, 2, 2]);
        assert_eq!(FlipSchedule::new(FlipKind::Linear, &s4, 10).counts, vec![1, 2, 3, 4]);
        assert_eq!(FlipSchedule::new(FlipKind::Constant, &s4, 6).counts, vec![2, 2, 1, 1]);
    }

    #[test]
    fn flip_counts_hit_total() {
        let mut rng = seeded(9);
        for _ in 0..1000 {
            let kind = if rng.random::<bool>() { FlipKind::Constant } else { FlipKind::Linear };
            let sk = [ScheduleKind::Linear, ScheduleKind::Quadratic, ScheduleKind::Cosine][rng.random_range(0..3)];
            let k = rng.random_range(1..200);
            let total = rng.random_range(0..2000);
            let f = FlipSchedule::new(kind, &TimeSchedule::new(sk, k, 3.0).unwrap(), total);
            assert_eq!(f.counts.len(), k);
            assert_eq!(f.counts.iter().sum::<usize>(), total);
        }
    }
}
