//! Residual MLP denoiser `(t, x) ↦ d_t(x) ∈ (0,1)^d`.
//!
//! Architecture: sinusoidal features of the backward time go through one
//! hidden layer to a time embedding; the input bits (mapped to ±1) are lifted
//! to the hidden width and pass through residual blocks
//! `h ← h + W₂ silu(W₁ LN(h) + Wₜ e(t))`; a final layer norm and linear map
//! produce logits and a sigmoid gives the denoiser. Gradients are computed by
//! a hand-written reverse pass over this fixed graph.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};
pub use optim::{AdamW, AdamWConfig};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::oracle::DenoiserVector;
use crate::rng::seeded;
use crate::state::BitState;
use crate::training::{loss_terms, LossBreakdown, LossSpec, TrainBatch};

const LN_EPS: f64 = 1e-5;
const MAX_FREQ: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub width: usize,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale architecture for dimension `d`.
    pub fn new(d: usize) -> Self {
        Self { d, blocks: 2, width: 128, time_embed_dim: 32, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > crate::state::MAX_DIM {
            return Err(invalid(format!("model dimension {} out of range", self.d)));
        }
        if self.blocks == 0 || self.width == 0 || self.time_embed_dim == 0 {
            return Err(invalid("blocks, width and time_embed_dim must be positive"));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(invalid("time_embed_dim must be even (sin/cos pairs)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Mat {
    off: usize,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Copy, Debug)]
struct Vect {
    off: usize,
    len: usize,
}

#[derive(Clone, Debug)]
struct BlockLayout {
    ln_g: Vect,
    ln_b: Vect,
    w1: Mat,
    b1: Vect,
    wt: Mat,
    bt: Vect,
    w2: Mat,
    b2: Vect,
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Clone, Debug)]
struct Layout {
    te_w: Mat,
    te_b: Vect,
    in_w: Mat,
    in_b: Vect,
    blocks: Vec<BlockLayout>,
    out_ln_g: Vect,
    out_ln_b: Vect,
    out_w: Mat,
    out_b: Vect,
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let mut off = 0;
        let mut mat = |rows, cols| {
            let m = Mat { off, rows, cols };
            off += rows * cols;
            m
        };
        let w = cfg.width;
        let te_w = mat(cfg.time_embed_dim, w);
        let in_w = mat(cfg.d, w);
        let mut block_mats = Vec::new();
        for _ in 0..cfg.blocks {
            block_mats.push((mat(w, w), mat(w, w), mat(w, w)));
        }
        let out_w = mat(w, cfg.d);
        let mut vect = |len| {
            let v = Vect { off, len };
            off += len;
            v
        };
        let te_b = vect(w);
        let in_b = vect(w);
        let blocks = block_mats
            .into_iter()
            .map(|(w1, wt, w2)| BlockLayout {
                ln_g: vect(w),
                ln_b: vect(w),
                w1,
                b1: vect(w),
                wt,
                bt: vect(w),
                w2,
                b2: vect(w),
            })
            .collect();
        let out_ln_g = vect(w);
        let out_ln_b = vect(w);
        let out_b = vect(cfg.d);
        Layout { te_w, te_b, in_w, in_b, blocks, out_ln_g, out_ln_b, out_w, out_b, total: off }
    }
}

fn mat<'a>(p: &'a [f64], m: Mat) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((m.rows, m.cols), &p[m.off..m.off + m.rows * m.cols]).unwrap()
}

fn mat_mut<'a>(p: &'a mut [f64], m: Mat) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((m.rows, m.cols), &mut p[m.off..m.off + m.rows * m.cols]).unwrap()
}

fn vect<'a>(p: &'a [f64], v: Vect) -> ArrayView1<'a, f64> {
    ArrayView1::from(&p[v.off..v.off + v.len])
}

fn vect_mut<'a>(p: &'a mut [f64], v: Vect) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut p[v.off..v.off + v.len])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Sinusoidal features of the backward time, frequencies log-spaced in
/// `[1, 100]`.
fn time_features(times: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> =
        (0..half).map(|k| if half > 1 { (MAX_FREQ.ln() * k as f64 / (half - 1) as f64).exp() } else { 1.0 }).collect();
    let mut out = Array2::zeros((times.len(), dim));
    for (r, &t) in times.iter().enumerate() {
        for (k, &f) in freqs.iter().enumerate() {
            out[[r, k]] = (f * t).sin();
            out[[r, half + k]] = (f * t).cos();
        }
    }
    out
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, inv_std })
}

/// Returns `dL/dx` and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    mut dg: ArrayViewMut1<f64>,
    mut db: ArrayViewMut1<f64>,
) -> Array2<f64> {
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = dy * &g;
    for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        for (v, &x) in row.iter_mut().zip(xh.iter()) {
            *v = is * (*v - mean_d - x * mean_dx);
        }
    }
    dx
}

struct BlockCache {
    ln: LnCache,
    u: Array2<f64>,
    a1: Array2<f64>,
    z1: Array2<f64>,
}

struct ForwardCache {
    emb: Array2<f64>,
    te_pre: Array2<f64>,
    temb: Array2<f64>,
    xin: Array2<f64>,
    blocks: Vec<BlockCache>,
    out_ln: LnCache,
    uo: Array2<f64>,
}

/// Anything that maps `(backward time, state)` batches to denoiser values.
pub trait Denoise {
    fn dim(&self) -> usize;

    /// Row `i` is the denoiser at `(times[i], states[i])`.
    fn denoise(&self, times: &[f64], states: &[BitState]) -> Result<Array2<f64>>;
}

/// A configuration together with its flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: Vec<f64>,
}

impl DenoiserModel {
    /// Fan-in scaled uniform initialization; the output layer starts at zero
    /// so every prediction is exactly 0.5.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = seeded(config.seed);
        let fill = |p: &mut [f64], m: Mat, rng: &mut crate::rng::DmpmRng| {
            let bound = 1.0 / (m.rows as f64).sqrt();
            for v in &mut p[m.off..m.off + m.rows * m.cols] {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(&mut params, layout.te_w, &mut rng);
        fill(&mut params, layout.in_w, &mut rng);
        for b in &layout.blocks {
            fill(&mut params, b.w1, &mut rng);
            fill(&mut params, b.wt, &mut rng);
            fill(&mut params, b.w2, &mut rng);
            vect_mut(&mut params, b.ln_g).fill(1.0);
        }
        vect_mut(&mut params, layout.out_ln_g).fill(1.0);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = Layout::new(&config).total;
        if params.len() != expected {
            return Err(invalid(format!("expected {expected} parameters, got {}", params.len())));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Range of the output-layer weights and bias in the flat vector.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let l = Layout::new(&self.config);
        l.out_w.off..l.out_w.off + l.out_w.rows * l.out_w.cols
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::ModelCorrupt { index }),
            None => Ok(()),
        }
    }

    fn check_inputs(&self, times: &[f64], states: &[BitState]) -> Result<()> {
        if times.len() != states.len() {
            return Err(invalid(format!("{} times for {} states", times.len(), states.len())));
        }
        if let Some(s) = states.iter().find(|s| s.dim() != self.config.d) {
            return Err(Error::DimensionMismatch { expected: self.config.d, got: s.dim() });
        }
        Ok(())
    }

    fn forward(&self, times: &[f64], states: &[BitState]) -> (Array2<f64>, ForwardCache) {
        let layout = Layout::new(&self.config);
        let p = &self.params;
        let emb = time_features(times, self.config.time_embed_dim);
        let te_pre = emb.dot(&mat(p, layout.te_w)) + vect(p, layout.te_b);
        let temb = te_pre.mapv(silu);
        let d = self.config.d;
        let mut xin = Array2::zeros((states.len(), d));
        for (r, s) in states.iter().enumerate() {
            for i in 0..d {
                xin[[r, i]] = 2.0 * s.bit(i) as f64 - 1.0;
            }
        }
        let mut h = xin.dot(&mat(p, layout.in_w)) + vect(p, layout.in_b);
        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for bl in &layout.blocks {
            let (u, ln) = layer_norm(&h, vect(p, bl.ln_g), vect(p, bl.ln_b));
            let a1 = u.dot(&mat(p, bl.w1)) + vect(p, bl.b1) + temb.dot(&mat(p, bl.wt)) + vect(p, bl.bt);
            let z1 = a1.mapv(silu);
            let a2 = z1.dot(&mat(p, bl.w2)) + vect(p, bl.b2);
            h += &a2;
            blocks.push(BlockCache { ln, u, a1, z1 });
        }
        let (uo, out_ln) = layer_norm(&h, vect(p, layout.out_ln_g), vect(p, layout.out_ln_b));
        let logits = uo.dot(&mat(p, layout.out_w)) + vect(p, layout.out_b);
        (logits, ForwardCache { emb, te_pre, temb, xin, blocks, out_ln, uo })
    }

    /// Gradient of the loss with respect to every parameter given
    /// `dL/d(logits)`.
    fn backward(&self, d_logits: &Array2<f64>, cache: &ForwardCache) -> Vec<f64> {
        let layout = Layout::new(&self.config);
        let p = &self.params;
        let mut g = vec![0.0; p.len()];

        mat_mut(&mut g, layout.out_w).assign(&cache.uo.t().dot(d_logits));
        vect_mut(&mut g, layout.out_b).assign(&d_logits.sum_axis(Axis(0)));
        let duo = d_logits.dot(&mat(p, layout.out_w).t());
        let mut dh = {
            let (gg, gb) = split_two(&mut g, layout.out_ln_g, layout.out_ln_b);
            layer_norm_backward(&duo, &cache.out_ln, vect(p, layout.out_ln_g), gg, gb)
        };

        let mut dtemb = Array2::<f64>::zeros(cache.temb.raw_dim());
        for (bl, bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
            mat_mut(&mut g, bl.w2).assign(&bc.z1.t().dot(&dh));
            vect_mut(&mut g, bl.b2).assign(&dh.sum_axis(Axis(0)));
            let dz1 = dh.dot(&mat(p, bl.w2).t());
            let mut da1 = dz1;
            da1.zip_mut_with(&bc.a1, |v, &a| *v *= silu_grad(a));
            mat_mut(&mut g, bl.w1).assign(&bc.u.t().dot(&da1));
            vect_mut(&mut g, bl.b1).assign(&da1.sum_axis(Axis(0)));
            mat_mut(&mut g, bl.wt).assign(&cache.temb.t().dot(&da1));
            vect_mut(&mut g, bl.bt).assign(&da1.sum_axis(Axis(0)));
            dtemb += &da1.dot(&mat(p, bl.wt).t());
            let du = da1.dot(&mat(p, bl.w1).t());
            let (gg, gb) = split_two(&mut g, bl.ln_g, bl.ln_b);
            dh += &layer_norm_backward(&du, &bc.ln, vect(p, bl.ln_g), gg, gb);
        }

        mat_mut(&mut g, layout.in_w).assign(&cache.xin.t().dot(&dh));
        vect_mut(&mut g, layout.in_b).assign(&dh.sum_axis(Axis(0)));
        let mut dte = dtemb;
        dte.zip_mut_with(&cache.te_pre, |v, &a| *v *= silu_grad(a));
        mat_mut(&mut g, layout.te_w).assign(&cache.emb.t().dot(&dte));
        vect_mut(&mut g, layout.te_b).assign(&dte.sum_axis(Axis(0)));
        g
    }

    /// Denoiser for a batch; row `i` belongs to `(times[i], states[i])`.
    pub fn predict_batch(&self, times: &[f64], states: &[BitState]) -> Result<Array2<f64>> {
        self.check_finite()?;
        self.check_inputs(times, states)?;
        let (logits, _) = self.forward(times, states);
        Ok(logits.mapv(sigmoid))
    }

    pub fn predict(&self, t: f64, x: &BitState) -> Result<DenoiserVector> {
        let out = self.predict_batch(&[t], std::slice::from_ref(x))?;
        Ok(DenoiserVector { time: t, values: out.row(0).to_vec() })
    }

    /// Loss on `batch` and its gradient with respect to the parameters.
    pub fn loss_and_grad(&self, batch: &TrainBatch, spec: &LossSpec) -> Result<(LossBreakdown, Vec<f64>)> {
        self.check_finite()?;
        let (times, states) = batch.model_inputs();
        self.check_inputs(&times, &states)?;
        let (logits, cache) = self.forward(&times, &states);
        let preds = logits.mapv(sigmoid);
        let (losses, d_pred) = loss_terms(batch, preds.view(), spec, true)?;
        let mut d_logits = d_pred.expect("gradient requested");
        d_logits.zip_mut_with(&preds, |g, &q| *g *= q * (1.0 - q));
        Ok((losses, self.backward(&d_logits, &cache)))
    }

    /// Loss only (no backward pass).
    pub fn loss(&self, batch: &TrainBatch, spec: &LossSpec) -> Result<LossBreakdown> {
        let (times, states) = batch.model_inputs();
        let preds = self.predict_batch(&times, &states)?;
        Ok(loss_terms(batch, preds.view(), spec, false)?.0)
    }
}

fn split_two(g: &mut [f64], a: Vect, b: Vect) -> (ArrayViewMut1<'_, f64>, ArrayViewMut1<'_, f64>) {
    debug_assert!(a.off + a.len <= b.off);
    let (lo, hi) = g.split_at_mut(b.off);
    (ArrayViewMut1::from(&mut lo[a.off..a.off + a.len]), ArrayViewMut1::from(&mut hi[..b.len]))
}

impl Denoise for DenoiserModel {
    fn dim(&self) -> usize {
        self.config.d
    }

    fn denoise(&self, times: &[f64], states: &[BitState]) -> Result<Array2<f64>> {
        self.predict_batch(times, states)
    }
}

/// Adapts a closure `(t, x) -> d_t(x)` to [`Denoise`].
pub struct FnDenoiser<F> {
    d: usize,
    f: F,
}

impl<F: Fn(f64, &BitState) -> Result<Vec<f64>>> FnDenoiser<F> {
    pub fn new(d: usize, f: F) -> Self {
        Self { d, f }
    }
}

impl<F: Fn(f64, &BitState) -> Result<Vec<f64>>> Denoise for FnDenoiser<F> {
    fn dim(&self) -> usize {
        self.d
    }

    fn denoise(&self, times: &[f64], states: &[BitState]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.len(), self.d));
        for (r, (&t, x)) in times.iter().zip(states).enumerate() {
            let v = (self.f)(t, x)?;
            out.slice_mut(s![r, ..]).assign(&Array1::from(v));
        }
        Ok(out)
    }
}
