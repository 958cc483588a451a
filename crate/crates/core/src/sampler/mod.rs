//! Generative samplers for the backward process and their schedules.
//!
//! All samplers start from the uniform law and run in backward time
//! `t ∈ [0, T_f]`:
//!
//! - [`SamplerKind::Continuous`]: exact-clock simulation of the time-varying
//!   backward chain on the total rate,
//! - [`SamplerKind::PerCoord`]: the same chain with one clock per coordinate,
//! - [`SamplerKind::Discrete`]: piecewise-constant rates on a time grid,
//!   at most one flip per grid step,
//! - [`SamplerKind::Flip`]: as `Discrete` but flipping `M_k` coordinates per
//!   crossing,
//! - [`SamplerKind::Denoise`]: denoise/renoise cycling.

mod chains;
mod schedule;
mod source;

pub use chains::{
    run_continuous, run_continuous_counted, run_denoise_renoise, run_discretized, run_flip_schedule, run_percoord,
    run_piecewise_exact, run_piecewise_exact_with, MICRO_STEP_FRACTION,
};
pub use schedule::{FlipKind, FlipSchedule, ScheduleKind, TimeSchedule};
pub use source::{Corrupted, Counting, ExactOracle, LearnedModel, ScoreSource};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, DmpmRng};
use crate::state::{BitState, EmpiricalSet};

/// Chains advanced together per batch in [`sample_many`].
pub const CHAIN_BATCH: usize = 8192;

pub fn sample_exact_continuous<S: ScoreSource + ?Sized, R: Rng>(src: &S, rng: &mut R) -> Result<BitState> {
    Ok(run_continuous(src, std::slice::from_mut(rng), None)?[0])
}

pub fn sample_exact_percoord<S: ScoreSource + ?Sized, R: Rng>(src: &S, rng: &mut R) -> Result<BitState> {
    Ok(run_percoord(src, std::slice::from_mut(rng), None)?[0])
}

pub fn sample_discretized<S: ScoreSource + ?Sized, R: Rng>(
    src: &S,
    schedule: &TimeSchedule,
    rng: &mut R,
) -> Result<BitState> {
    Ok(run_discretized(src, schedule, std::slice::from_mut(rng))?[0])
}

pub fn sample_flip_schedule<S: ScoreSource + ?Sized, R: Rng>(
    src: &S,
    schedule: &TimeSchedule,
    flips: &FlipSchedule,
    rng: &mut R,
) -> Result<BitState> {
    Ok(run_flip_schedule(src, schedule, flips, std::slice::from_mut(rng))?[0])
}

pub fn sample_denoise_renoise<S: ScoreSource + ?Sized, R: Rng>(
    src: &S,
    schedule: &TimeSchedule,
    rng: &mut R,
) -> Result<BitState> {
    Ok(run_denoise_renoise(src, schedule, std::slice::from_mut(rng))?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Continuous,
    #[serde(rename = "percoord")]
    PerCoord,
    Discrete,
    Flip,
    Denoise,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Continuous => "continuous",
            SamplerKind::PerCoord => "percoord",
            SamplerKind::Discrete => "discrete",
            SamplerKind::Flip => "flip",
            SamplerKind::Denoise => "denoise",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(SamplerKind::Continuous),
            "percoord" => Ok(SamplerKind::PerCoord),
            "discrete" => Ok(SamplerKind::Discrete),
            "flip" => Ok(SamplerKind::Flip),
            "denoise" => Ok(SamplerKind::Denoise),
            _ => Err(invalid(format!("unknown sampler {s:?}"))),
        }
    }
}

/// A fully specified sampler.
#[derive(Clone, Debug, PartialEq)]
pub enum SamplerSpec {
    Continuous { micro_step: Option<f64> },
    PerCoord { micro_step: Option<f64> },
    Discrete(TimeSchedule),
    Flip(TimeSchedule, FlipSchedule),
    Denoise(TimeSchedule),
}

impl SamplerSpec {
    pub fn kind(&self) -> SamplerKind {
        match self {
            SamplerSpec::Continuous { .. } => SamplerKind::Continuous,
            SamplerSpec::PerCoord { .. } => SamplerKind::PerCoord,
            SamplerSpec::Discrete(_) => SamplerKind::Discrete,
            SamplerSpec::Flip(..) => SamplerKind::Flip,
            SamplerSpec::Denoise(_) => SamplerKind::Denoise,
        }
    }

    pub fn schedule(&self) -> Option<&TimeSchedule> {
        match self {
            SamplerSpec::Discrete(s) | SamplerSpec::Flip(s, _) | SamplerSpec::Denoise(s) => Some(s),
            _ => None,
        }
    }

    pub fn flips(&self) -> Option<&FlipSchedule> {
        match self {
            SamplerSpec::Flip(_, f) => Some(f),
            _ => None,
        }
    }

    /// Runs the sampler on a batch of chains, one generator per chain.
    pub fn run<S: ScoreSource + ?Sized, R: Rng>(&self, src: &S, rngs: &mut [R]) -> Result<Vec<BitState>> {
        match self {
            SamplerSpec::Continuous { micro_step } => run_continuous(src, rngs, *micro_step),
            SamplerSpec::PerCoord { micro_step } => run_percoord(src, rngs, *micro_step),
            SamplerSpec::Discrete(s) => run_discretized(src, s, rngs),
            SamplerSpec::Flip(s, f) => run_flip_schedule(src, s, f, rngs),
            SamplerSpec::Denoise(s) => run_denoise_renoise(src, s, rngs),
        }
    }
}

/// Generator of chain `i` for master seed `seed`.
pub fn chain_rng(seed: u64, i: usize) -> DmpmRng {
    stream(seed, "sample", i as u64)
}

/// Draws `n` independent samples; chain `i` uses [`chain_rng`]`(seed, i)`,
/// so the output is a deterministic function of `(spec, src, n, seed)`.
pub fn sample_many<S: ScoreSource + ?Sized>(src: &S, spec: &SamplerSpec, n: usize, seed: u64) -> Result<EmpiricalSet> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHAIN_BATCH) {
        let mut rngs: Vec<DmpmRng> = (start..(start + CHAIN_BATCH).min(n)).map(|i| chain_rng(seed, i)).collect();
        out.extend(spec.run(src, &mut rngs)?);
    }
    EmpiricalSet::new(out)
}

/// Metadata written next to a sample dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpSidecar {
    pub sampler: SamplerKind,
    pub schedule: Option<ScheduleKind>,
    pub steps: Option<usize>,
    pub early_stop: f64,
    pub flip_kind: Option<FlipKind>,
    pub flip_total: Option<usize>,
    pub seed: u64,
    pub lambda: f64,
    pub t_f: f64,
    pub d: usize,
    pub n: usize,
    pub source: String,
    pub config_hash: Option<String>,
    pub data_hash: Option<String>,
}

impl DumpSidecar {
    pub fn describe(
        spec: &SamplerSpec,
        src_name: &str,
        seed: u64,
        lambda: f64,
        t_f: f64,
        samples: &EmpiricalSet,
    ) -> Self {
        let schedule = spec.schedule();
        Self {
            sampler: spec.kind(),
            schedule: schedule.map(|s| s.kind),
            steps: schedule.map(|s| s.steps),
            early_stop: schedule.map_or(0.0, |s| s.early_stop_time()),
            flip_kind: spec.flips().map(|f| f.kind),
            flip_total: spec.flips().map(|f| f.total),
            seed,
            lambda,
            t_f,
            d: samples.dim(),
            n: samples.len(),
            source: src_name.to_string(),
            config_hash: None,
            data_hash: None,
        }
    }
}

/// Path of the JSON sidecar belonging to a dump file.
pub fn sidecar_path(dump: &Path) -> PathBuf {
    let mut s = dump.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes one `0/1` string per line plus the JSON sidecar.
pub fn write_dump(path: &Path, samples: &EmpiricalSet, sidecar: &DumpSidecar) -> Result<()> {
    std::fs::write(path, samples.to_lines())?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

/// Reads a dump; the sidecar is returned when present.
pub fn read_dump(path: &Path) -> Result<(EmpiricalSet, Option<DumpSidecar>)> {
    let samples = EmpiricalSet::from_lines(&std::fs::read_to_string(path)?)?;
    let side = sidecar_path(path);
    let sidecar = if side.exists() { Some(serde_json::from_str(&std::fs::read_to_string(side)?)?) } else { None };
    Ok((samples, sidecar))
}
