//! Training objectives and the training loop.
//!
//! All three losses are averaged over batch items and coordinates:
//!
//! - L²: `(d^θ − y)²` with `y^ℓ = 1{x_0^ℓ ≠ x_τ^ℓ}`,
//! - cross-entropy: `−[y log d^θ + (1−y) log(1−d^θ)]`,
//! - entropy: `−s^θ + (f − 1) log(1 − s^θ)` where `s^θ` is the score implied
//!   by `d^θ` and `f` the regression target of the sampled pair.
//!
//! With `w_scaled`, the L² and cross-entropy integrands of an item at
//! backward time `t` are divided by `w_t = (1 − α_{T_f−t})/2`.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::sample_conditional;
use crate::model::{AdamW, AdamWConfig, Denoise, DenoiserModel};
use crate::oracle::{guarded_forward_time, score_coefficients};
use crate::state::{BitState, Distribution, EmpiricalSet};

/// Clip applied to predictions inside logarithms of the cross-entropy.
pub const CE_CLIP: f64 = 1e-12;

/// Loss above which training is aborted as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w_scaled: bool,
}

impl LossSpec {
    pub fn new(w1: f64, w2: f64, w3: f64, w_scaled: bool) -> Result<Self> {
        let spec = Self { w1, w2, w3, w_scaled };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.w1, self.w2, self.w3];
        if ws.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid(format!("loss weights must be finite and nonnegative, got {ws:?}")));
        }
        if ws.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }

    /// Weights rescaled onto the 2-simplex.
    pub fn normalized(&self) -> Self {
        let s = self.w1 + self.w2 + self.w3;
        Self { w1: self.w1 / s, w2: self.w2 / s, w3: self.w3 / s, w_scaled: self.w_scaled }
    }

    /// Named weight combinations: every nonempty subset of {l2, e, ce} except
    /// the entropy term alone, with equal normalized weights. A `_w` suffix
    /// selects the `1/w_t`-scaled variant, e.g. `l2_ce_w`.
    pub fn preset(name: &str) -> Result<Self> {
        let (base, scaled) = match name.strip_suffix("_w") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let (w1, w2, w3) = match base {
            "l2" => (1.0, 0.0, 0.0),
            "ce" => (0.0, 0.0, 1.0),
            "l2_e" => (1.0, 1.0, 0.0),
            "l2_ce" => (1.0, 0.0, 1.0),
            "e_ce" => (0.0, 1.0, 1.0),
            "l2_e_ce" => (1.0, 1.0, 1.0),
            _ => return Err(invalid(format!("unknown loss preset {name:?}; expected one of {:?}", Self::PRESETS))),
        };
        Ok(Self { w1, w2, w3, w_scaled: scaled }.normalized())
    }

    pub const PRESETS: [&'static str; 6] = ["l2", "ce", "l2_e", "l2_ce", "e_ce", "l2_e_ce"];
}

/// `w_t = (1 − α_{T_f−t})/2`, forward time guarded.
pub fn w_scale(t: f64, lambda: f64, t_f: f64) -> f64 {
    let (tau, _) = guarded_forward_time(t, t_f);
    // (1 − e^{−2λτ})/2 without cancellation
    -0.5 * (-2.0 * lambda * tau).exp_m1()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub x0: BitState,
    /// Backward time.
    pub t: f64,
    /// `x0` noised to forward time `T_f − t`.
    pub xt: BitState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub lambda: f64,
    pub t_f: f64,
    pub items: Vec<TrainItem>,
}

impl TrainBatch {
    /// Draws a backward time uniformly on `[0, T_f]` for every data point and
    /// noises it to the matching forward time.
    pub fn draw<R: Rng + ?Sized>(data: &[BitState], lambda: f64, t_f: f64, rng: &mut R) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("batch must be nonempty"));
        }
        let items = data
            .iter()
            .map(|x0| {
                let t = rng.random::<f64>() * t_f;
                let xt = sample_conditional(x0, t_f - t, lambda, rng)?;
                Ok(TrainItem { x0: *x0, t, xt })
            })
            .collect::<Result<_>>()?;
        Ok(Self { lambda, t_f, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.x0.dim())
    }

    /// Model inputs `(t, x_τ)`.
    pub fn model_inputs(&self) -> (Vec<f64>, Vec<BitState>) {
        self.items.iter().map(|i| (i.t, i.xt)).unzip()
    }

    /// Fraction of items whose forward time was clamped to the guard.
    pub fn clamped_fraction(&self) -> f64 {
        let n = self.items.iter().filter(|i| guarded_forward_time(i.t, self.t_f).1).count();
        n as f64 / self.items.len().max(1) as f64
    }
}

/// Component losses (each averaged over items and coordinates) and their
/// weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l2: f64,
    pub entropy: f64,
    pub ce: f64,
}

/// Evaluates all loss components on predictions `preds` (rows aligned with
/// `batch.items`). With `want_grad`, also returns `∂total/∂preds`.
pub fn loss_terms(
    batch: &TrainBatch,
    preds: ArrayView2<f64>,
    spec: &LossSpec,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Array2<f64>>)> {
    spec.validate()?;
    if batch.is_empty() {
        return Err(invalid("batch must be nonempty"));
    }
    let d = batch.dim();
    if preds.dim() != (batch.len(), d) {
        return Err(invalid(format!("predictions have shape {:?}, expected ({}, {d})", preds.dim(), batch.len())));
    }
    let norm = 1.0 / (batch.len() * d) as f64;
    let mut grad = want_grad.then(|| Array2::zeros((batch.len(), d)));
    let mut acc = LossBreakdown::default();
    let mut clipped = 0usize;
    for (i, item) in batch.items.iter().enumerate() {
        let (c1, c2) = score_coefficients(item.t, batch.lambda, batch.t_f);
        let inv_w = if spec.w_scaled { 1.0 / w_scale(item.t, batch.lambda, batch.t_f) } else { 1.0 };
        let (mut l2, mut ent, mut ce) = (0.0, 0.0, 0.0);
        for l in 0..d {
            let q = preds[[i, l]];
            let y = if item.x0.bit(l) != item.xt.bit(l) { 1.0 } else { 0.0 };

            let diff = q - y;
            l2 += diff * diff * inv_w;

            let qc = q.clamp(CE_CLIP, 1.0 - CE_CLIP);
            let inside = qc == q;
            if !inside {
                clipped += 1;
            }
            ce -= (y * qc.ln() + (1.0 - y) * (1.0 - qc).ln()) * inv_w;

            let s = c1 - c2 * q;
            let f = c1 - c2 * y;
            let one_minus_s = 1.0 - s;
            ent += -s + (f - 1.0) * one_minus_s.ln();

            if let Some(g) = grad.as_mut() {
                let g_l2 = 2.0 * diff * inv_w;
                let g_ce = if inside { (-y / q + (1.0 - y) / (1.0 - q)) * inv_w } else { 0.0 };
                let g_e = c2 * (1.0 + (f - 1.0) / one_minus_s);
                g[[i, l]] = norm * (spec.w1 * g_l2 + spec.w2 * g_e + spec.w3 * g_ce);
            }
        }
        let item_total = spec.w1 * l2 + spec.w2 * ent + spec.w3 * ce;
        if !item_total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at batch item {i} (t = {}, l2 = {l2}, entropy = {ent}, ce = {ce})",
                item.t
            )));
        }
        acc.l2 += l2;
        acc.entropy += ent;
        acc.ce += ce;
    }
    if clipped > 0 {
        log::debug!("cross-entropy clipped {clipped} predictions");
    }
    acc.l2 *= norm;
    acc.entropy *= norm;
    acc.ce *= norm;
    acc.total = spec.w1 * acc.l2 + spec.w2 * acc.entropy + spec.w3 * acc.ce;
    Ok((acc, grad))
}

fn evaluate(batch: &TrainBatch, model: &dyn Denoise, spec: &LossSpec) -> Result<LossBreakdown> {
    let (times, states) = batch.model_inputs();
    let preds = model.denoise(&times, &states)?;
    if let Some((idx, _)) = preds.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Training(format!("non-finite prediction at batch item {}", idx / batch.dim())));
    }
    Ok(loss_terms(batch, preds.view(), spec, false)?.0)
}

/// Denoiser L² loss (`w`-scaled when requested).
pub fn loss_l2(batch: &TrainBatch, model: &dyn Denoise, w_scaled: bool) -> Result<f64> {
    Ok(evaluate(batch, model, &LossSpec { w1: 1.0, w2: 0.0, w3: 0.0, w_scaled })?.l2)
}

/// Cross-entropy of the flip indicators under the denoiser.
pub fn loss_ce(batch: &TrainBatch, model: &dyn Denoise, w_scaled: bool) -> Result<f64> {
    Ok(evaluate(batch, model, &LossSpec { w1: 0.0, w2: 0.0, w3: 1.0, w_scaled })?.ce)
}

/// Entropy loss of the implied score; never `w`-scaled.
pub fn loss_entropy(batch: &TrainBatch, model: &dyn Denoise) -> Result<f64> {
    Ok(evaluate(batch, model, &LossSpec { w1: 0.0, w2: 1.0, w3: 0.0, w_scaled: false })?.entropy)
}

pub fn combined_loss(batch: &TrainBatch, model: &dyn Denoise, spec: &LossSpec) -> Result<LossBreakdown> {
    evaluate(batch, model, spec)
}

/// Source of training points.
#[derive(Clone, Debug)]
pub enum Dataset {
    /// Fresh `epoch_size` draws at every epoch.
    Generative { dist: Distribution, epoch_size: usize },
    /// A fixed sample set, reshuffled every epoch.
    Fixed(EmpiricalSet),
}

impl Dataset {
    pub fn dim(&self) -> usize {
        match self {
            Dataset::Generative { dist, .. } => dist.dim(),
            Dataset::Fixed(set) => set.dim(),
        }
    }

    fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<BitState>> {
        match self {
            Dataset::Generative { dist, epoch_size } => Ok(dist.sample(*epoch_size, rng)?.samples().to_vec()),
            Dataset::Fixed(set) => {
                let mut v = set.samples().to_vec();
                v.shuffle(rng);
                Ok(v)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Exponential moving average rate of the weights; `None` disables it.
    pub ema: Option<f64>,
    /// Step number of the first update (nonzero when resuming).
    pub start_step: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 256, optimizer: AdamWConfig::default(), ema: None, start_step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub losses: LossBreakdown,
    pub clamped_frac: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,loss_total,loss_l2,loss_e,loss_ce,clamped_frac";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let l = &r.losses;
            writeln!(out, "{},{},{},{},{},{}", r.step, l.total, l.l2, l.entropy, l.ce, r.clamped_frac).unwrap();
        }
        out
    }

    /// Mean total loss over the first and last `k` rows.
    pub fn head_tail_means(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.rows.len()).max(1);
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.losses.total).sum::<f64>() / rows.len() as f64;
        (mean(&self.rows[..k]), mean(&self.rows[self.rows.len() - k..]))
    }
}

pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub log: TrainLog,
    /// Step number after the last update.
    pub final_step: u64,
}

/// Runs `config.steps` optimizer updates: each step draws a batch from the
/// dataset, a uniform backward time per item, noises the items and descends
/// the weighted loss.
pub fn train<R: Rng + ?Sized>(
    mut model: DenoiserModel,
    dataset: &Dataset,
    lambda: f64,
    t_f: f64,
    spec: &LossSpec,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    spec.validate()?;
    if dataset.dim() != model.config().d {
        return Err(Error::DimensionMismatch { expected: model.config().d, got: dataset.dim() });
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if let Some(rate) = config.ema {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("EMA rate must be in [0, 1), got {rate}")));
        }
    }
    let mut opt = AdamW::new(config.optimizer.clone(), model.num_params());
    let mut ema = config.ema.map(|_| model.params().to_vec());
    let mut log = TrainLog::default();
    let mut pool: Vec<BitState> = Vec::new();
    let mut cursor = 0;
    for k in 0..config.steps {
        let step = config.start_step + k;
        if pool.len() - cursor < config.batch_size {
            pool = dataset.epoch(rng)?;
            cursor = 0;
            if pool.len() < config.batch_size {
                return Err(invalid(format!("epoch of {} points is smaller than the batch size", pool.len())));
            }
        }
        let batch = TrainBatch::draw(&pool[cursor..cursor + config.batch_size], lambda, t_f, rng)?;
        cursor += config.batch_size;
        let (losses, grad) = model.loss_and_grad(&batch, spec)?;
        if !losses.total.is_finite() || losses.total.abs() > DIVERGENCE_THRESHOLD {
            return Err(Error::Training(format!("divergence at step {step}: {losses:?}")));
        }
        opt.step(model.params_mut(), &grad)?;
        if let (Some(avg), Some(rate)) = (ema.as_mut(), config.ema) {
            for (a, &p) in avg.iter_mut().zip(model.params()) {
                *a = rate * *a + (1.0 - rate) * p;
            }
        }
        log.rows.push(LogRow { step, losses, clamped_frac: batch.clamped_fraction() });
    }
    if let Some(avg) = ema {
        model.params_mut().copy_from_slice(&avg);
    }
    model.check_finite()?;
    Ok(TrainOutcome { model, log, final_step: config.start_step + config.steps })
}
