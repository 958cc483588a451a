//! Sliced Wasserstein distance between sample sets on the hypercube.

use rand::Rng;
use rand_distr::{Distribution as _, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::state::{check_dim, EmpiricalSet};

pub const DEFAULT_DIRECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwdEstimate {
    pub value: f64,
    pub n_directions: usize,
    /// Monte-Carlo standard error over directions.
    pub std_error: f64,
}

/// Average over `n_dirs` directions `u` uniform on the probability simplex of
/// the 1-D Wasserstein-1 distance between the projections `x ↦ ⟨u, x⟩`.
pub fn swd<R: Rng + ?Sized>(a: &EmpiricalSet, b: &EmpiricalSet, n_dirs: usize, rng: &mut R) -> Result<SwdEstimate> {
    check_dim(a.dim(), b.dim())?;
    if n_dirs == 0 {
        return Err(crate::error::invalid("need at least one direction"));
    }
    let d = a.dim();
    let bits = |set: &EmpiricalSet| -> Vec<f64> {
        set.samples().iter().flat_map(|x| (0..d).map(move |l| x.bit(l) as f64)).collect()
    };
    let (xa, xb) = (bits(a), bits(b));
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    let mut values = Vec::with_capacity(n_dirs);
    for _ in 0..n_dirs {
        let mut u: Vec<f64> = (0..d).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = u.iter().sum();
        u.iter_mut().for_each(|v| *v /= s);
        project(&xa, &u, &mut pa);
        project(&xb, &u, &mut pb);
        values.push(wasserstein1(&mut pa, &mut pb));
    }
    let n = n_dirs as f64;
    let value = values.iter().sum::<f64>() / n;
    let std_error =
        if n_dirs > 1 { (values.iter().map(|v| (v - value).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt() } else { 0.0 };
    Ok(SwdEstimate { value, n_directions: n_dirs, std_error })
}

fn project(bits: &[f64], u: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(bits.chunks_exact(u.len())) {
        *o = row.iter().zip(u).map(|(x, w)| x * w).sum();
    }
}

/// `∫ |F_a − F_b|` between two empirical measures; sorts its inputs.
fn wasserstein1(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    if a.len() == b.len() {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    let (wa, wb) = (1.0 / a.len() as f64, 1.0 / b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (fa - fb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            fa += wa;
            i += 1;
        }
        while j < b.len() && b[j] == next {
            fb += wb;
            j += 1;
        }
        prev = next;
    }
    total
}
