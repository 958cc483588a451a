//! Subcommand implementations. Every command writes below `out_dir` and
//! stamps its outputs with the run-config hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dmpm::analysis::{
    divergences, epsilon_exact, random_full_support, swd, tv_early_stop_bound, verify_theorem, BoundReport,
    MAX_EXACT_DIM,
};
use dmpm::forward::{alpha, marginal, sample_conditional};
use dmpm::model::{save_checkpoint, CheckpointMeta, DenoiserModel};
use dmpm::rng::stream;
use dmpm::sampler::{
    read_dump, sample_many, write_dump, Corrupted, DumpSidecar, ExactOracle, LearnedModel, ScoreSource, TimeSchedule,
};
use dmpm::training::{train, TrainLog};
use dmpm::{BitState, DenseTable, Distribution, EmpiricalSet};
use serde::Serialize;

use crate::config::RunConfig;

/// Largest dimension for which `eval` tabulates the sample histogram.
pub const EVAL_EXACT_DIM: usize = 16;

/// Tolerance for the closed-form early-stopping TV checks.
const TV_TOL: f64 = 1e-12;

pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.out_dir.clone() }
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("train").join("checkpoint.bin")
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples").join("samples.txt")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// CSV with a leading `# config_hash=` comment line.
fn write_csv(path: &Path, hash: &str, body: &str) -> Result<()> {
    fs::write(path, format!("# config_hash={hash}\n{body}")).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct DataRecord<'a> {
    config_hash: String,
    data_hash: String,
    d: usize,
    samples_file: &'a str,
    n_samples: usize,
    distribution: Option<Distribution>,
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let data = cfg.load_data()?;
    let dir = Paths::new(cfg).dir("data")?;
    let (law, samples) = match &data {
        crate::config::LoadedData::Law(dist) => {
            let mut rng = stream(cfg.seed, "data", 0);
            (Some(dist.clone()), dist.sample(cfg.dataset.samples, &mut rng)?)
        }
        crate::config::LoadedData::Samples(set) => (None, set.clone()),
    };
    fs::write(dir.join("samples.txt"), samples.to_lines())?;
    let record = DataRecord {
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash()?,
        d: cfg.d,
        samples_file: "samples.txt",
        n_samples: samples.len(),
        distribution: law,
    };
    write_json(&dir.join("distribution.json"), &record)?;
    println!("wrote {} samples of dimension {} to {}", samples.len(), cfg.d, dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    config_hash: String,
    data_hash: String,
    num_params: usize,
    start_step: u64,
    final_step: u64,
    loss_first: f64,
    loss_last: f64,
    loss_head_mean: f64,
    loss_tail_mean: f64,
}

pub fn train_cmd(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let spec = cfg.loss_spec()?;
    let data = cfg.load_data()?;
    let (model, start_step) = match resume {
        Some(path) => {
            let (learned, meta) = LearnedModel::from_checkpoint(path, cfg.lambda, cfg.t_f, cfg.d)
                .with_context(|| format!("resuming from {}", path.display()))?;
            log::info!("resuming from step {}", meta.step);
            (learned.model().clone(), meta.step)
        }
        None => (DenoiserModel::init(cfg.model_config())?, 0),
    };
    let mut rng = stream(cfg.seed, "train", start_step);
    let outcome = train(
        model,
        &data.dataset(cfg.dataset.samples),
        cfg.lambda,
        cfg.t_f,
        &spec,
        &cfg.train_config(start_step),
        &mut rng,
    )?;

    let paths = Paths::new(cfg);
    let dir = paths.dir("train")?;
    let meta = CheckpointMeta {
        lambda: cfg.lambda,
        t_f: cfg.t_f,
        d: cfg.d,
        loss_weights: [spec.w1, spec.w2, spec.w3],
        w_scaled: spec.w_scaled,
        seed: cfg.seed,
        step: outcome.final_step,
        run_config: cfg.to_toml(),
    };
    save_checkpoint(&paths.checkpoint(), &outcome.model, &meta)?;

    let every = cfg.train.log_every;
    let last = outcome.final_step.saturating_sub(1);
    let rows =
        TrainLog { rows: outcome.log.rows.iter().filter(|r| r.step % every == 0 || r.step == last).cloned().collect() };
    let csv = rows.to_csv();
    let log_path = dir.join("log.csv");
    if resume.is_some() && log_path.exists() {
        // Continue the existing log: drop the header of the new block.
        let mut text = fs::read_to_string(&log_path)?;
        text.push_str(csv.split_once('\n').map_or("", |(_, body)| body));
        fs::write(&log_path, text)?;
    } else {
        write_csv(&log_path, &cfg.hash(), &csv)?;
    }

    let (head, tail) = outcome.log.head_tail_means(100);
    let summary = TrainSummary {
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash()?,
        num_params: outcome.model.num_params(),
        start_step,
        final_step: outcome.final_step,
        loss_first: outcome.log.rows.first().map_or(f64::NAN, |r| r.losses.total),
        loss_last: outcome.log.rows.last().map_or(f64::NAN, |r| r.losses.total),
        loss_head_mean: head,
        loss_tail_mean: tail,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "trained steps {}..{}: mean loss {head:.4} -> {tail:.4}; checkpoint {}",
        start_step,
        outcome.final_step,
        paths.checkpoint().display()
    );
    Ok(())
}

pub struct SampleSource<'a> {
    pub exact_oracle: bool,
    pub checkpoint: Option<&'a Path>,
}

pub fn sample_cmd(cfg: &RunConfig, source: SampleSource<'_>, output: Option<&Path>) -> Result<()> {
    let spec = cfg.sampler_spec()?;
    let paths = Paths::new(cfg);
    let (src, name): (Box<dyn ScoreSource>, String) = if source.exact_oracle {
        let law = cfg.load_data()?.law()?;
        (Box::new(ExactOracle::new(law, cfg.lambda, cfg.t_f)?), "exact-oracle".to_string())
    } else {
        let ckpt = source.checkpoint.map(Path::to_path_buf).unwrap_or_else(|| paths.checkpoint());
        let (learned, _) = LearnedModel::from_checkpoint(&ckpt, cfg.lambda, cfg.t_f, cfg.d)
            .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
        (Box::new(learned), format!("checkpoint:{}", ckpt.display()))
    };
    let samples = sample_many(&src, &spec, cfg.sampler.n, cfg.seed)?;
    let mut sidecar = DumpSidecar::describe(&spec, &name, cfg.seed, cfg.lambda, cfg.t_f, &samples);
    sidecar.config_hash = Some(cfg.hash());
    sidecar.data_hash = Some(cfg.data_hash()?);
    let out = match output {
        Some(p) => p.to_path_buf(),
        None => {
            paths.dir("samples")?;
            paths.samples()
        }
    };
    write_dump(&out, &samples, &sidecar)?;
    println!("wrote {} samples ({} sampler, source {name}) to {}", samples.len(), spec.kind(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalMetrics {
    config_hash: String,
    data_hash: String,
    samples_file: String,
    n_samples: usize,
    reference_samples: usize,
    swd: f64,
    swd_std_error: f64,
    swd_floor: f64,
    max_bit_mean_error: f64,
    /// `TV(μ*, empirical)` on the `[0, 2]` scale.
    tv: Option<f64>,
    kl_empirical_to_data: Option<f64>,
}

pub fn eval_cmd(cfg: &RunConfig, samples_path: Option<&Path>, allow_mismatch: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    let path = samples_path.map(Path::to_path_buf).unwrap_or_else(|| paths.samples());
    let (samples, sidecar) = read_dump(&path).with_context(|| format!("reading samples {}", path.display()))?;
    if samples.dim() != cfg.d {
        bail!("samples have dimension {}, config has d = {}", samples.dim(), cfg.d);
    }
    let data_hash = cfg.data_hash()?;
    let recorded = sidecar.as_ref().and_then(|s| s.data_hash.clone());
    if recorded.as_deref() != Some(data_hash.as_str()) {
        let msg = match &recorded {
            Some(h) => format!("samples were generated for data {h}, config describes data {data_hash}"),
            None => "samples carry no data lineage".to_string(),
        };
        if allow_mismatch || cfg.eval.allow_lineage_mismatch {
            log::warn!("{msg}; continuing as requested");
        } else {
            bail!("{msg} (pass --allow-lineage-mismatch to evaluate anyway)");
        }
    }

    let law = cfg.load_data()?.law()?;
    let reference = law.sample(cfg.eval.reference_samples, &mut stream(cfg.seed, "eval-reference", 0))?;
    let twin = law.sample(samples.len(), &mut stream(cfg.seed, "eval-reference", 1))?;
    let est = swd(&samples, &reference, cfg.eval.swd_directions, &mut stream(cfg.seed, "eval-swd", 0))?;
    let floor = swd(&twin, &reference, cfg.eval.swd_directions, &mut stream(cfg.seed, "eval-swd", 0))?;

    let truth_means = bit_means_of(&law)?;
    let max_bit_mean_error =
        samples.bit_means().iter().zip(&truth_means).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (tv, kl) = if cfg.d <= EVAL_EXACT_DIM {
        let div_tv = divergences(&law.to_table()?, &samples.histogram()?)?;
        let div_kl = divergences(&samples.histogram()?, &law.to_table()?)?;
        (Some(div_tv.tv), Some(div_kl.kl))
    } else {
        (None, None)
    };

    let metrics = EvalMetrics {
        config_hash: cfg.hash(),
        data_hash,
        samples_file: path.display().to_string(),
        n_samples: samples.len(),
        reference_samples: reference.len(),
        swd: est.value,
        swd_std_error: est.std_error,
        swd_floor: floor.value,
        max_bit_mean_error,
        tv,
        kl_empirical_to_data: kl,
    };
    let dir = paths.dir("eval")?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    let mut csv = String::from("metric,value\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    writeln!(csv, "swd,{}", metrics.swd)?;
    writeln!(csv, "swd_std_error,{}", metrics.swd_std_error)?;
    writeln!(csv, "swd_floor,{}", metrics.swd_floor)?;
    writeln!(csv, "max_bit_mean_error,{}", metrics.max_bit_mean_error)?;
    writeln!(csv, "tv,{}", opt(metrics.tv))?;
    writeln!(csv, "kl_empirical_to_data,{}", opt(metrics.kl_empirical_to_data))?;
    write_csv(&dir.join("metrics.csv"), &metrics.config_hash, &csv)?;
    println!(
        "SWD {:.4e} ± {:.1e} (two-draw floor {:.4e}), max bit-mean error {:.4}{}",
        metrics.swd,
        metrics.swd_std_error,
        metrics.swd_floor,
        max_bit_mean_error,
        tv.map_or(String::new(), |t| format!(", TV {t:.4}"))
    );
    Ok(())
}

fn bit_means_of(law: &Distribution) -> Result<Vec<f64>> {
    Ok(match law {
        Distribution::Product(p) => p.probs().to_vec(),
        Distribution::Table(t) => {
            let d = t.dim();
            let mut m = vec![0.0; d];
            for (x, &p) in t.masses().iter().enumerate() {
                for (i, v) in m.iter_mut().enumerate() {
                    if x >> i & 1 == 1 {
                        *v += p;
                    }
                }
            }
            m
        }
    })
}

#[derive(Serialize)]
struct BoundRow {
    instance: String,
    kind: &'static str,
    d: usize,
    steps: usize,
    report: BoundReport,
}

#[derive(Serialize)]
struct TvRow {
    d: usize,
    eta: f64,
    law: &'static str,
    tv_measured: f64,
    bound_exact: f64,
    bound_loose: f64,
}

#[derive(Serialize)]
struct ValidateReport {
    config_hash: String,
    theorem_checks: usize,
    theorem_violations: usize,
    min_slack: f64,
    tv_checks: usize,
    tv_violations: usize,
    fault_injection: Option<FaultSummary>,
}

#[derive(Serialize)]
struct FaultSummary {
    shift: f64,
    checks: usize,
    /// Cases where the measured KL exceeds the bound evaluated with `ε = 0`;
    /// expected under fault injection and not counted as violations.
    exceeds_eps_free_bound: usize,
    /// Cases where the measured KL exceeds the bound with the estimated `ε`.
    violations: usize,
}

/// Runs every bound check and returns the number of violated inequalities.
pub fn validate_bounds(cfg: &RunConfig) -> Result<usize> {
    let v = &cfg.validate;
    if let Some(&d) = v.dims.iter().find(|&&d| d > MAX_EXACT_DIM) {
        bail!("exact bound validation enumerates 2^d states and is limited to d <= {MAX_EXACT_DIM}; got d = {d}");
    }
    if v.tv_max_dim > dmpm::state::ENUMERATION_LIMIT.min(16) {
        bail!("validate.tv_max_dim = {} is too large to tabulate", v.tv_max_dim);
    }
    let mut rows = Vec::new();
    let mut faults = Vec::new();
    for &d in &v.dims {
        for i in 0..v.instances {
            let mut rng = stream(cfg.seed, "validate", (d * 1_000_000 + i) as u64);
            let law = random_full_support(d, &mut rng)?;
            let oracle = ExactOracle::new(law.clone().into(), cfg.lambda, v.t_f)?;
            for &k in &v.steps {
                for &eta in std::iter::once(&0.0).chain(&v.early_stop) {
                    let schedule = if eta > 0.0 {
                        TimeSchedule::early_stop(v.schedule, k, v.t_f, eta)?
                    } else {
                        TimeSchedule::new(v.schedule, k, v.t_f)?
                    };
                    let report = verify_theorem(&oracle, &law, &schedule, 0.0)?;
                    rows.push(BoundRow {
                        instance: format!("d{d}-i{i}-K{k}-eta{eta}"),
                        kind: "oracle",
                        d,
                        steps: k,
                        report,
                    });
                    if v.corrupt_shift != 0.0 && i == 0 {
                        let bad = Corrupted::new(&oracle, v.corrupt_shift);
                        let eps = epsilon_exact(&bad, &oracle, &schedule)
                            .with_context(|| format!("estimating the injected score error for d = {d}, K = {k}"))?
                            .max;
                        let free = verify_theorem(&bad, &law, &schedule, 0.0)?;
                        let with_eps = verify_theorem(&bad, &law, &schedule, eps)?;
                        faults.push((free.violated(), with_eps.violated()));
                        rows.push(BoundRow {
                            instance: format!("d{d}-i{i}-K{k}-eta{eta}-fault"),
                            kind: "fault",
                            d,
                            steps: k,
                            report: with_eps,
                        });
                    }
                }
            }
        }
    }

    let mut tv_rows = Vec::new();
    for d in 1..=v.tv_max_dim {
        let delta = DenseTable::delta(&BitState::zeros(d)?)?;
        let mut rng = stream(cfg.seed, "validate-tv", d as u64);
        let random = random_full_support(d, &mut rng)?;
        for j in 1..=v.tv_grid {
            let eta = j as f64 / v.tv_grid as f64;
            let (exact, loose) = tv_early_stop_bound(eta, cfg.lambda, d)?;
            for (name, law) in [("point_mass", &delta), ("random", &random)] {
                let noised = marginal(&law.clone().into(), eta, cfg.lambda)?.to_table()?;
                let tv = divergences(&noised, law)?.tv;
                tv_rows.push(TvRow { d, eta, law: name, tv_measured: tv, bound_exact: exact, bound_loose: loose });
            }
        }
    }

    let hash = cfg.hash();
    let dir = Paths::new(cfg).dir("validate")?;
    let mut csv = String::from("instance,kind,d,steps,eta,kl_init,beta,tau,eps,t_f,kl_measured,bound,slack\n");
    for r in &rows {
        let p = &r.report;
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.instance,
            r.kind,
            r.d,
            r.steps,
            p.eta,
            p.kl_init,
            p.beta,
            p.tau,
            p.eps,
            p.t_f,
            p.measured_kl.unwrap_or(f64::NAN),
            p.bound,
            p.slack().unwrap_or(f64::NAN)
        )?;
    }
    write_csv(&dir.join("theorem.csv"), &hash, &csv)?;
    let mut csv = String::from("d,eta,law,tv_measured,bound_exact,bound_loose\n");
    for r in &tv_rows {
        writeln!(csv, "{},{},{},{},{},{}", r.d, r.eta, r.law, r.tv_measured, r.bound_exact, r.bound_loose)?;
    }
    write_csv(&dir.join("tv_early_stop.csv"), &hash, &csv)?;

    let oracle_rows: Vec<_> = rows.iter().filter(|r| r.kind == "oracle").collect();
    let theorem_violations = oracle_rows.iter().filter(|r| r.report.violated()).count();
    let min_slack = oracle_rows.iter().filter_map(|r| r.report.slack()).fold(f64::INFINITY, f64::min);
    let tv_violations = tv_rows
        .iter()
        .filter(|r| r.tv_measured > r.bound_exact + TV_TOL || r.bound_exact > r.bound_loose + TV_TOL)
        .count();
    let fault_injection = (v.corrupt_shift != 0.0).then(|| FaultSummary {
        shift: v.corrupt_shift,
        checks: faults.len(),
        exceeds_eps_free_bound: faults.iter().filter(|f| f.0).count(),
        violations: faults.iter().filter(|f| f.1).count(),
    });
    let fault_violations = fault_injection.as_ref().map_or(0, |f| f.violations);
    let report = ValidateReport {
        config_hash: hash,
        theorem_checks: oracle_rows.len(),
        theorem_violations,
        min_slack,
        tv_checks: tv_rows.len(),
        tv_violations,
        fault_injection,
    };
    write_json(&dir.join("report.json"), &report)?;
    println!(
        "KL bound: {} checks, {} violations, min slack {:.3e}; TV early-stop: {} checks, {} violations",
        report.theorem_checks, theorem_violations, min_slack, report.tv_checks, tv_violations
    );
    if let Some(f) = &report.fault_injection {
        println!(
            "fault injection (shift {}): {} checks, {} exceed the eps-free bound, {} violate the bound with estimated eps",
            f.shift, f.checks, f.exceeds_eps_free_bound, f.violations
        );
    }
    Ok(theorem_violations + tv_violations + fault_violations)
}

pub fn forward_diag(cfg: &RunConfig, times: &[f64]) -> Result<()> {
    let law = cfg.load_data()?.law()?;
    let n = cfg.dataset.samples;
    let x0 = law.sample(n, &mut stream(cfg.seed, "forward-diag", 0))?;
    let mut rng = stream(cfg.seed, "forward-diag", 1);
    let mut csv = String::from("t,alpha,flip_prob,max_bit_mean_error,kl_to_uniform,tv_to_uniform\n");
    for &t in times {
        if !(t >= 0.0) {
            bail!("forward times must be nonnegative, got {t}");
        }
        let a = alpha(t, cfg.lambda)?;
        let noised = marginal(&law, t, cfg.lambda)?;
        let xt = x0
            .samples()
            .iter()
            .map(|x| sample_conditional(x, t, cfg.lambda, &mut rng))
            .collect::<dmpm::Result<Vec<_>>>()?;
        let empirical = EmpiricalSet::new(xt)?.bit_means();
        let err = empirical.iter().zip(bit_means_of(&noised)?).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let (kl, tv) = if cfg.d <= EVAL_EXACT_DIM {
            let div = divergences(&noised.to_table()?, &DenseTable::uniform(cfg.d)?)?;
            (div.kl.to_string(), div.tv.to_string())
        } else {
            (String::new(), String::new())
        };
        writeln!(csv, "{t},{a},{},{err},{kl},{tv}", (1.0 - a) / 2.0)?;
        println!(
            "t = {t}: alpha = {a:.6}, max bit-mean error {err:.4}{}",
            if kl.is_empty() { String::new() } else { format!(", KL to uniform {kl}") }
        );
    }
    let dir = Paths::new(cfg).dir("forward")?;
    write_csv(&dir.join("diag.csv"), &cfg.hash(), &csv)?;
    Ok(())
}
