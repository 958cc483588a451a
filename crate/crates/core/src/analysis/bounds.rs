//! Fisher-like information, the KL convergence bound, the early-stopping
//! total-variation bound and the step-size planners derived from them.
//!
//! The bounds are stated for unit jump rate `λ = 1`; they are evaluated as
//! written for any input.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::state::DenseTable;

/// `h(a) = a log a − a + 1` with `h(0) = 1`.
pub fn h_entropy(a: f64) -> f64 {
    if a == 0.0 {
        1.0
    } else {
        a * a.ln() - a + 1.0
    }
}

/// `β(μ) = E_μ[Σ_ℓ h(μ(φ^ℓ X)/μ(X))]` by enumeration. Requires full support.
pub fn fisher_like_beta(mu: &DenseTable) -> Result<f64> {
    let d = mu.dim();
    let m = mu.masses();
    if let Some(i) = m.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroMass { state: crate::state::BitState::new(i as u64, d)?.to_string() });
    }
    let mut beta = 0.0;
    for (x, &px) in m.iter().enumerate() {
        let inner: f64 = (0..d).map(|l| h_entropy(m[x ^ (1 << l)] / px)).sum();
        beta += px * inner;
    }
    Ok(beta)
}

/// Components of the bound `e^{−T_f} KL + τ β + ε (T_f − η)`; `η = 0`
/// except in early-stopping mode, where `β` is that of the noised law `μ_η`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub kl_init: f64,
    pub beta: f64,
    pub tau: f64,
    pub eps: f64,
    pub t_f: f64,
    pub eta: f64,
    pub bound: f64,
    pub measured_kl: Option<f64>,
}

impl BoundReport {
    /// The bound recomputed from the stored components.
    pub fn recompute(&self) -> f64 {
        (-self.t_f).exp() * self.kl_init + self.tau * self.beta + self.eps * (self.t_f - self.eta)
    }

    /// `bound − measured_kl`, when a measurement is attached.
    pub fn slack(&self) -> Option<f64> {
        self.measured_kl.map(|kl| self.bound - kl)
    }

    pub fn violated(&self) -> bool {
        self.slack().is_some_and(|s| s < 0.0)
    }

    pub fn early_stop(kl_init: f64, beta_eta: f64, tau: f64, eps: f64, t_f: f64, eta: f64) -> Result<Self> {
        check_nonnegative(&[kl_init, beta_eta, tau, eps, t_f, eta])?;
        if eta >= t_f {
            return Err(invalid(format!("early-stop time {eta} must be below T_f = {t_f}")));
        }
        let mut r = Self { kl_init, beta: beta_eta, tau, eps, t_f, eta, bound: 0.0, measured_kl: None };
        r.bound = r.recompute();
        Ok(r)
    }
}

fn check_nonnegative(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !(*v >= 0.0) || v.is_nan()) {
        return Err(invalid(format!("bound inputs must be nonnegative, got {values:?}")));
    }
    Ok(())
}

/// `e^{−T_f} kl_init + τ β + ε T_f`.
pub fn theorem_bound(kl_init: f64, beta: f64, tau: f64, eps: f64, t_f: f64) -> Result<BoundReport> {
    check_nonnegative(&[kl_init, beta, tau, eps, t_f])?;
    let mut r = BoundReport { kl_init, beta, tau, eps, t_f, eta: 0.0, bound: 0.0, measured_kl: None };
    r.bound = r.recompute();
    Ok(r)
}

/// `(2 − 2(½ + ½e^{−2λη})^d, 2 − 2(1 − λη)^d)`: bounds on `TV(μ_η, μ*)`.
pub fn tv_early_stop_bound(eta: f64, lambda: f64, d: usize) -> Result<(f64, f64)> {
    check_nonnegative(&[eta, lambda])?;
    let d = d as i32;
    let exact = 2.0 - 2.0 * (0.5 + 0.5 * (-2.0 * lambda * eta).exp()).powi(d);
    let loose = 2.0 - 2.0 * (1.0 - lambda * eta).powi(d);
    Ok((exact, loose))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub h: f64,
    pub steps: u64,
    pub t_f: f64,
}

/// Largest step `h = ε/(2β)` and smallest `K = ⌈log(2 KL/ε)/h⌉` (at least
/// one), with horizon `T_f = hK`.
pub fn plan_steps(eps: f64, kl_init: f64, beta: f64) -> Result<StepPlan> {
    if !(eps > 0.0) {
        return Err(Error::Planning(format!("target accuracy must be positive, got {eps}")));
    }
    if !(beta > 0.0) {
        return Err(Error::Planning(format!(
            "Fisher-like information must be positive (got {beta}); the data law is uniform and needs no steps"
        )));
    }
    if !(kl_init > 0.0) {
        return Err(Error::Planning(format!("initial KL must be positive, got {kl_init}")));
    }
    let h = eps / (2.0 * beta);
    let steps = ((2.0 * kl_init / eps).ln() / h).ceil().max(1.0) as u64;
    Ok(StepPlan { h, steps, t_f: h * steps as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopPlan {
    pub eta: f64,
    pub h: f64,
    /// Number of steps; kept as a float because it overflows integers for
    /// moderate `d`.
    pub steps: f64,
    pub t_f: f64,
}

/// `η = (1 − (1 − ε/2)^{1/d})/λ`,
/// `h̄ = ε²(λη)^d / (2^{d+3} d (1 + 2λη)^d)`,
/// `K̄ = ⌈(log(2 KL/ε²) − η)/h̄⌉` (at least one) and `T_f = η + h̄K̄`.
pub fn plan_early_stop(eps: f64, d: usize, lambda: f64, kl_init: f64) -> Result<EarlyStopPlan> {
    if !(eps > 0.0 && eps < 2.0) {
        return Err(Error::Planning(format!("target accuracy must lie in (0, 2) to give a positive η, got {eps}")));
    }
    if d == 0 || !(lambda > 0.0) || !(kl_init > 0.0) {
        return Err(Error::Planning(format!("need d ≥ 1, λ > 0 and KL > 0 (d = {d}, λ = {lambda}, KL = {kl_init})")));
    }
    let di = d as i32;
    let eta = (1.0 - (1.0 - eps / 2.0).powf(1.0 / d as f64)) / lambda;
    let le = lambda * eta;
    let h = eps * eps * le.powi(di) / (2f64.powi(di + 3) * d as f64 * (1.0 + 2.0 * le).powi(di));
    if !(h > 0.0) {
        return Err(Error::Planning(format!("step size underflows for d = {d}, ε = {eps}")));
    }
    let steps = (((2.0 * kl_init / (eps * eps)).ln() - eta) / h).ceil().max(1.0);
    Ok(EarlyStopPlan { eta, h, steps, t_f: eta + h * steps })
}
