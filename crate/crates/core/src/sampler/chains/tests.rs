use super::*;
use crate::analysis::{chi_square_gof, divergences, random_full_support};
use crate::rng::seeded;
use crate::sampler::{sample_many, Counting, ExactOracle, SamplerSpec, ScheduleKind};
use crate::state::{sawtooth_params, DenseTable, Distribution};

fn uniform_oracle(d: usize, t_f: f64) -> ExactOracle {
    ExactOracle::new(DenseTable::uniform(d).unwrap().into(), 1.0, t_f).unwrap()
}

fn tv_to(samples: &crate::state::EmpiricalSet, target: &Distribution) -> f64 {
    divergences(&samples.histogram().unwrap(), &target.to_table().unwrap()).unwrap().tv
}

fn all_specs(t_f: f64, k: usize) -> Vec<SamplerSpec> {
    let sched = TimeSchedule::new(ScheduleKind::Cosine, k, t_f).unwrap();
    let flips = FlipSchedule::new(super::super::FlipKind::Linear, &sched, 3);
    vec![
        SamplerSpec::Continuous { micro_step: None },
        SamplerSpec::PerCoord { micro_step: None },
        SamplerSpec::Discrete(sched.clone()),
        SamplerSpec::Flip(sched.clone(), flips),
        SamplerSpec::Denoise(sched),
    ]
}

#[test]
fn every_sampler_keeps_uniform_law() {
    let src = uniform_oracle(3, 3.0);
    for spec in all_specs(3.0, 50) {
        let out = sample_many(&src, &spec, 20_000, 11).unwrap();
        let gof = chi_square_gof(&out.histogram().unwrap(), &DenseTable::uniform(3).unwrap(), out.len()).unwrap();
        assert!(gof.passes_3sigma(), "{:?}: {gof:?}", spec.kind());
    }
}

#[test]
fn samplers_are_reproducible() {
    let src = ExactOracle::new(sawtooth_params(4).unwrap().into(), 1.0, 3.0).unwrap();
    for spec in all_specs(3.0, 20) {
        let a = sample_many(&src, &spec, 300, 5).unwrap();
        let b = sample_many(&src, &spec, 300, 5).unwrap();
        let c = sample_many(&src, &spec, 300, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // chain i only depends on its own stream
        let head = sample_many(&src, &spec, 100, 5).unwrap();
        assert_eq!(&a.samples()[..100], head.samples());
    }
}

#[test]
fn continuous_recovers_random_d2_law() {
    let mu = random_full_support(2, &mut seeded(21)).unwrap();
    let src = ExactOracle::new(mu.clone().into(), 1.0, 6.0).unwrap();
    let out = sample_many(&src, &SamplerSpec::Continuous { micro_step: None }, 100_000, 3).unwrap();
    let tv = tv_to(&out, &mu.into());
    assert!(tv < 0.03, "tv = {tv}");
}

#[test]
fn continuous_jump_count_on_uniform_matches_poisson() {
    let src = uniform_oracle(3, 2.0);
    let mut rngs: Vec<_> = (0..20_000).map(|i| seeded(1000 + i)).collect();
    let (_, jumps) = run_continuous_counted(&src, &mut rngs, None).unwrap();
    let mean = jumps.iter().sum::<u64>() as f64 / jumps.len() as f64;
    let expected = 3.0 * 2.0;
    let sigma = (expected / jumps.len() as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * sigma, "mean jumps {mean}");
}

#[test]
fn continuous_jump_count_bounded_on_sawtooth() {
    let src = ExactOracle::new(sawtooth_params(3).unwrap().into(), 1.0, 3.0).unwrap();
    let mut rngs: Vec<_> = (0..20_000).map(|i| seeded(i)).collect();
    let (_, jumps) = run_continuous_counted(&src, &mut rngs, None).unwrap();
    let n = jumps.len() as f64;
    let mean = jumps.iter().sum::<u64>() as f64 / n;
    let var = jumps.iter().map(|&j| (j as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean <= 9.0 + 3.0 * (var / n).sqrt(), "mean jumps {mean}");
}

#[test]
fn percoord_on_uniform_jumps_uniformly() {
    // With constant unit rates every coordinate flips a Poisson(λT) number of
    // times independently, so each output bit is flipped with probability
    // (1 − e^{−2λT})/2 relative to its start.
    let src = uniform_oracle(3, 0.2);
    let mut counts = [0usize; 3];
    let n = 40_000;
    for i in 0..n {
        let mut rng = seeded(i as u64);
        let start = {
            let mut r = rng.clone();
            uniform_start(3, std::slice::from_mut(&mut r)).unwrap()[0]
        };
        let out = run_percoord(&src, std::slice::from_mut(&mut rng), None).unwrap()[0];
        for (l, c) in counts.iter_mut().enumerate() {
            *c += (start.bit(l) != out.bit(l)) as usize;
        }
    }
    let p = 0.5 * (1.0 - (-0.4f64).exp());
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    for c in counts {
        assert!((c as f64 / n as f64 - p).abs() < 4.0 * sigma, "{counts:?}");
    }
}

#[test]
fn single_step_grid_flips_at_most_once() {
    let src = ExactOracle::new(sawtooth_params(4).unwrap().into(), 1.0, 3.0).unwrap();
    let sched = TimeSchedule::new(ScheduleKind::Linear, 1, 3.0).unwrap();
    let mut flipped = 0;
    for i in 0..2000 {
        let mut rng = seeded(i);
        let start = uniform_start(4, std::slice::from_mut(&mut rng.clone())).unwrap()[0];
        let out = run_discretized(&src, &sched, std::slice::from_mut(&mut rng)).unwrap()[0];
        assert!(start.hamming(&out) <= 1);
        flipped += (start != out) as usize;
    }
    assert!(flipped > 0);
}

#[test]
fn flip_schedule_with_unit_counts_is_discretized() {
    let src = ExactOracle::new(sawtooth_params(3).unwrap().into(), 1.0, 3.0).unwrap();
    let sched = TimeSchedule::new(ScheduleKind::Cosine, 30, 3.0).unwrap();
    let mut a: Vec<_> = (0..500).map(seeded).collect();
    let mut b = a.clone();
    let x = run_discretized(&src, &sched, &mut a).unwrap();
    let y = run_flip_schedule(&src, &sched, &FlipSchedule::uniform(1, 30), &mut b).unwrap();
    assert_eq!(x, y);
}

#[test]
fn full_flip_count_flips_every_coordinate() {
    let src = uniform_oracle(4, 3.0);
    let sched = TimeSchedule::new(ScheduleKind::Linear, 1, 3.0).unwrap();
    let flips = FlipSchedule::uniform(4, 1);
    let mut changed = 0;
    for i in 0..500 {
        let mut rng = seeded(i);
        let start = uniform_start(4, std::slice::from_mut(&mut rng.clone())).unwrap()[0];
        let out = run_flip_schedule(&src, &sched, &flips, std::slice::from_mut(&mut rng)).unwrap()[0];
        let h = start.hamming(&out);
        assert!(h == 0 || h == 4);
        changed += (h == 4) as usize;
    }
    // crossing probability 1 − e^{−12}
    assert!(changed >= 499);
    // counts above d are clamped
    let mut rng = seeded(0);
    assert!(run_flip_schedule(&src, &sched, &FlipSchedule::uniform(9, 1), std::slice::from_mut(&mut rng)).is_ok());
}

#[test]
fn denoise_renoise_recovers_point_mass_in_one_cycle() {
    let x0: BitState = "10110".parse().unwrap();
    let src = ExactOracle::new(DenseTable::delta(&x0).unwrap().into(), 1.0, 3.0).unwrap();
    let sched = TimeSchedule::new(ScheduleKind::Linear, 1, 3.0).unwrap();
    let out = sample_many(&src, &SamplerSpec::Denoise(sched), 2000, 4).unwrap();
    assert!(out.samples().iter().all(|x| *x == x0));
    let sched = TimeSchedule::new(ScheduleKind::Cosine, 10, 3.0).unwrap();
    let out = sample_many(&src, &SamplerSpec::Denoise(sched), 2000, 4).unwrap();
    assert!(out.samples().iter().all(|x| *x == x0));
}

#[test]
fn grid_samplers_query_only_grid_times() {
    let src = Counting::new(ExactOracle::new(sawtooth_params(3).unwrap().into(), 1.0, 3.0).unwrap());
    let sched = TimeSchedule::new(ScheduleKind::Quadratic, 17, 3.0).unwrap();
    for spec in &all_specs(3.0, 17)[2..] {
        let spec = match spec {
            SamplerSpec::Discrete(_) => SamplerSpec::Discrete(sched.clone()),
            SamplerSpec::Flip(_, f) => SamplerSpec::Flip(sched.clone(), f.clone()),
            SamplerSpec::Denoise(_) => SamplerSpec::Denoise(sched.clone()),
            _ => unreachable!(),
        };
        sample_many(&src, &spec, 200, 1).unwrap();
    }
    assert_eq!(src.query_times(), sched.grid[..17].to_vec());
}

#[test]
fn discretized_with_early_stop_targets_noised_law() {
    let mu: Distribution = sawtooth_params(3).unwrap().into();
    let eta = 0.3;
    let src = ExactOracle::new(mu.clone(), 1.0, 4.0).unwrap();
    let sched = TimeSchedule::early_stop(ScheduleKind::Linear, 400, 4.0, eta).unwrap();
    let out = sample_many(&src, &SamplerSpec::Discrete(sched), 100_000, 8).unwrap();
    let target = crate::forward::marginal(&mu, eta, 1.0).unwrap();
    let tv = tv_to(&out, &target);
    assert!(tv < 0.03, "tv = {tv}");
}

#[test]
fn invalid_scores_are_reported() {
    let src = crate::sampler::Corrupted::new(uniform_oracle(2, 1.0), -2.0);
    let sched = TimeSchedule::new(ScheduleKind::Linear, 3, 1.0).unwrap();
    let mut rng = seeded(0);
    assert!(run_discretized(&src, &sched, std::slice::from_mut(&mut rng)).is_err());
    assert!(matches!(run_continuous(&src, std::slice::from_mut(&mut rng), None), Err(Error::Sampler { .. })));
    // mismatched horizon
    let sched = TimeSchedule::new(ScheduleKind::Linear, 3, 2.0).unwrap();
    assert!(run_discretized(&uniform_oracle(2, 1.0), &sched, std::slice::from_mut(&mut rng)).is_err());
}
