//! States of `{0,1}^d` and distributions over them.
//!
//! A state is packed into a `u64`: bit `i` of the integer is coordinate `i`.
//! The same integer indexes [`DenseTable`] masses, so table lookups and
//! flips are O(1). Coordinates are 0-based throughout the API.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Largest supported dimension (states are packed into a `u64`).
pub const MAX_DIM: usize = 64;

/// Largest dimension for which `2^d` tables are materialized.
pub const ENUMERATION_LIMIT: usize = 24;

pub fn check_enumerable(d: usize) -> Result<()> {
    if d > ENUMERATION_LIMIT {
        return Err(Error::EnumerationLimit { d, limit: ENUMERATION_LIMIT });
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct BitState {
    bits: u64,
    d: usize,
}

impl BitState {
    pub fn new(bits: u64, d: usize) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return Err(invalid(format!("dimension must be in 1..={MAX_DIM}, got {d}")));
        }
        if d < 64 && bits >> d != 0 {
            return Err(invalid(format!("index {bits} does not fit in {d} bits")));
        }
        Ok(Self { bits, d })
    }

    pub fn zeros(d: usize) -> Result<Self> {
        Self::new(0, d)
    }

    pub fn ones(d: usize) -> Result<Self> {
        Self::new(low_mask(d), d)
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        let mut packed = 0u64;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => packed |= 1 << i,
                other => return Err(invalid(format!("bit {i} is {other}, expected 0 or 1"))),
            }
        }
        Self::new(packed, bits.len())
    }

    /// Index of the state in `[0, 2^d)`.
    #[inline]
    pub fn index(&self) -> u64 {
        self.bits
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn bit(&self, i: usize) -> u8 {
        ((self.bits >> i) & 1) as u8
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.d).map(|i| self.bit(i)).collect()
    }

    /// Inverts coordinate `coord`, leaving the others untouched.
    pub fn flip(&self, coord: usize) -> Result<Self> {
        if coord >= self.d {
            return Err(invalid(format!("coordinate {coord} out of range for d = {}", self.d)));
        }
        Ok(self.flip_unchecked(coord))
    }

    #[inline]
    pub(crate) fn flip_unchecked(&self, coord: usize) -> Self {
        Self { bits: self.bits ^ (1 << coord), d: self.d }
    }

    /// Flips every coordinate set in `mask`.
    #[inline]
    pub(crate) fn xor_mask(&self, mask: u64) -> Self {
        Self { bits: self.bits ^ mask, d: self.d }
    }

    pub fn hamming(&self, other: &BitState) -> u32 {
        (self.bits ^ other.bits).count_ones()
    }

    pub fn count_ones(&self) -> u32 {
        self.bits.count_ones()
    }
}

#[inline]
pub(crate) fn low_mask(d: usize) -> u64 {
    if d >= 64 {
        u64::MAX
    } else {
        (1u64 << d) - 1
    }
}

/// Coordinate 0 is printed first.
impl fmt::Display for BitState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.d {
            f.write_str(if self.bit(i) == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for BitState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(invalid(format!("unexpected character {other:?} in state string"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(&bits)
    }
}

/// Independent Bernoulli coordinates with `P(x_i = 1) = p_i`, `0 < p_i < 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductBernoulli {
    probs: Vec<f64>,
}

impl ProductBernoulli {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.len() > MAX_DIM {
            return Err(invalid(format!("need 1..={MAX_DIM} probabilities, got {}", probs.len())));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, &p)| !(p > 0.0 && p < 1.0)) {
            return Err(invalid(format!("p[{i}] = {p} is not in the open interval (0, 1)")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, x: &BitState) -> Result<f64> {
        check_dim(self.dim(), x.dim())?;
        Ok(self.probs.iter().enumerate().map(|(i, &p)| if x.bit(i) == 1 { p } else { 1.0 - p }).product())
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> BitState {
        let mut bits = 0u64;
        for (i, &p) in self.probs.iter().enumerate() {
            if rng.random::<f64>() < p {
                bits |= 1 << i;
            }
        }
        BitState { bits, d: self.dim() }
    }

    pub fn to_table(&self) -> Result<DenseTable> {
        let d = self.dim();
        check_enumerable(d)?;
        let mut mass = vec![1.0; 1 << d];
        for (i, &p) in self.probs.iter().enumerate() {
            for (x, m) in mass.iter_mut().enumerate() {
                *m *= if (x >> i) & 1 == 1 { p } else { 1.0 - p };
            }
        }
        Ok(DenseTable { d, mass })
    }
}

/// Explicit masses over all `2^d` states, indexed by [`BitState::index`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTable {
    d: usize,
    mass: Vec<f64>,
}

/// Normalization tolerance for tables.
pub const TABLE_SUM_TOL: f64 = 1e-12;

impl DenseTable {
    pub fn new(d: usize, mass: Vec<f64>) -> Result<Self> {
        let table = Self::unchecked(d, mass)?;
        let sum: f64 = table.mass.iter().sum();
        if (sum - 1.0).abs() > TABLE_SUM_TOL {
            return Err(invalid(format!("table masses sum to {sum}, expected 1")));
        }
        Ok(table)
    }

    /// Rescales nonnegative masses to sum to one. The flag reports whether
    /// rescaling was needed.
    pub fn normalized(d: usize, mass: Vec<f64>) -> Result<(Self, bool)> {
        let mut table = Self::unchecked(d, mass)?;
        let sum: f64 = table.mass.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(invalid(format!("table masses sum to {sum}")));
        }
        let rescaled = (sum - 1.0).abs() > TABLE_SUM_TOL;
        if rescaled {
            table.mass.iter_mut().for_each(|m| *m /= sum);
        }
        Ok((table, rescaled))
    }

    fn unchecked(d: usize, mass: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dimension must be positive"));
        }
        check_enumerable(d)?;
        if mass.len() != 1 << d {
            return Err(invalid(format!("table for d = {d} needs {} masses, got {}", 1u64 << d, mass.len())));
        }
        if let Some((i, m)) = mass.iter().enumerate().find(|(_, &m)| !(m >= 0.0 && m.is_finite())) {
            return Err(invalid(format!("mass[{i}] = {m} is not a finite nonnegative number")));
        }
        Ok(Self { d, mass })
    }

    pub(crate) fn from_raw(d: usize, mass: Vec<f64>) -> Self {
        debug_assert_eq!(mass.len(), 1 << d);
        Self { d, mass }
    }

    pub fn uniform(d: usize) -> Result<Self> {
        check_enumerable(d)?;
        let n = 1usize << d;
        Self::new(d, vec![1.0 / n as f64; n])
    }

    pub fn delta(x: &BitState) -> Result<Self> {
        check_enumerable(x.dim())?;
        let mut mass = vec![0.0; 1 << x.dim()];
        mass[x.index() as usize] = 1.0;
        Self::new(x.dim(), mass)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn prob(&self, x: &BitState) -> Result<f64> {
        check_dim(self.d, x.dim())?;
        Ok(self.mass[x.index() as usize])
    }

    pub fn states(&self) -> impl Iterator<Item = BitState> + '_ {
        let d = self.d;
        (0..self.mass.len() as u64).map(move |i| BitState { bits: i, d })
    }

    /// Minimum mass over all states.
    pub fn min_mass(&self) -> f64 {
        self.mass.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Inverse-CDF sampler with a precomputed cumulative table.
    pub fn sampler(&self) -> TableSampler<'_> {
        let mut acc = 0.0;
        let cdf = self
            .mass
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        TableSampler { table: self, cdf }
    }
}

pub struct TableSampler<'a> {
    table: &'a DenseTable,
    cdf: Vec<f64>,
}

impl TableSampler<'_> {
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> BitState {
        let total = *self.cdf.last().unwrap();
        let u = rng.random::<f64>() * total;
        // first index whose cumulative mass exceeds u always has positive mass
        let mut i = self.cdf.partition_point(|&c| c <= u);
        if i >= self.cdf.len() {
            i = self.table.mass.iter().rposition(|&m| m > 0.0).unwrap_or(0);
        }
        BitState { bits: i as u64, d: self.table.d }
    }
}

/// A data law: either product-Bernoulli or an explicit table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Product(ProductBernoulli),
    Table(DenseTable),
}

impl Distribution {
    pub fn dim(&self) -> usize {
        match self {
            Distribution::Product(p) => p.dim(),
            Distribution::Table(t) => t.dim(),
        }
    }

    pub fn prob(&self, x: &BitState) -> Result<f64> {
        match self {
            Distribution::Product(p) => p.prob(x),
            Distribution::Table(t) => t.prob(x),
        }
    }

    pub fn to_table(&self) -> Result<DenseTable> {
        match self {
            Distribution::Product(p) => p.to_table(),
            Distribution::Table(t) => Ok(t.clone()),
        }
    }

    /// `n` i.i.d. draws.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<EmpiricalSet> {
        if n == 0 {
            return Err(invalid("sample count must be at least 1"));
        }
        let samples = match self {
            Distribution::Product(p) => (0..n).map(|_| p.sample_one(rng)).collect(),
            Distribution::Table(t) => {
                let s = t.sampler();
                (0..n).map(|_| s.sample_one(rng)).collect()
            }
        };
        EmpiricalSet::new(samples)
    }
}

impl From<ProductBernoulli> for Distribution {
    fn from(p: ProductBernoulli) -> Self {
        Distribution::Product(p)
    }
}

impl From<DenseTable> for Distribution {
    fn from(t: DenseTable) -> Self {
        Distribution::Table(t)
    }
}

/// A nonempty multiset of states of equal dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalSet {
    d: usize,
    samples: Vec<BitState>,
}

impl EmpiricalSet {
    pub fn new(samples: Vec<BitState>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| invalid("empirical set is empty"))?;
        let d = first.dim();
        if let Some(s) = samples.iter().find(|s| s.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, got: s.dim() });
        }
        Ok(Self { d, samples })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[BitState] {
        &self.samples
    }

    /// Empirical law as a table.
    pub fn histogram(&self) -> Result<DenseTable> {
        check_enumerable(self.d)?;
        let mut mass = vec![0.0; 1 << self.d];
        let w = 1.0 / self.samples.len() as f64;
        for s in &self.samples {
            mass[s.index() as usize] += w;
        }
        Ok(DenseTable::from_raw(self.d, mass))
    }

    /// Per-coordinate frequency of ones.
    pub fn bit_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for s in &self.samples {
            for (i, v) in m.iter_mut().enumerate() {
                *v += s.bit(i) as f64;
            }
        }
        let n = self.samples.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// One `0/1` string per line.
    pub fn to_lines(&self) -> String {
        let mut out = String::with_capacity(self.samples.len() * (self.d + 1));
        for s in &self.samples {
            out.push_str(&s.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let samples =
            text.lines().filter(|l| !l.trim().is_empty()).map(BitState::from_str).collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Sawtooth marginals: a single linear rise from 0.05 to 0.95 followed by a
/// linear fall back to 0.05 (for `d = 2` only the rise exists).
pub fn sawtooth_params(d: usize) -> Result<ProductBernoulli> {
    const LOW: f64 = 0.05;
    const HIGH: f64 = 0.95;
    if d < 2 {
        return Err(invalid(format!("sawtooth needs d >= 2, got {d}")));
    }
    let peak = d / 2;
    let probs = (0..d)
        .map(|i| {
            if i <= peak {
                LOW + (HIGH - LOW) * i as f64 / peak as f64
            } else {
                HIGH - (HIGH - LOW) * (i - peak) as f64 / (d - 1 - peak) as f64
            }
        })
        .collect();
    ProductBernoulli::new(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn flip_examples() {
        let x: BitState = "0000".parse().unwrap();
        assert_eq!(x.flip(0).unwrap().to_string(), "1000");
        assert!(x.flip(4).is_err());
    }

    #[test]
    fn state_string_roundtrip() {
        let x: BitState = "0110".parse().unwrap();
        assert_eq!(x.index(), 0b0110);
        assert_eq!(x.to_bits(), vec![0, 1, 1, 0]);
        assert!("01x".parse::<BitState>().is_err());
    }

    proptest! {
        #[test]
        fn flip_is_involution(d in 1usize..=64, raw in any::<u64>(), c in 0usize..64) {
            let x = BitState::new(raw & low_mask(d), d).unwrap();
            let c = c % d;
            let y = x.flip(c).unwrap();
            prop_assert_eq!(y.flip(c).unwrap(), x);
            prop_assert_eq!(x.hamming(&y), 1);
            prop_assert_eq!(y.dim(), d);
        }
    }

    #[test]
    fn sawtooth_small_and_d16() {
        let p = sawtooth_params(2).unwrap();
        assert_eq!(p.probs(), &[0.05, 0.95]);
        let p = sawtooth_params(16).unwrap();
        let probs = p.probs();
        assert!(probs.iter().all(|&v| (0.05 - 1e-15..=0.95 + 1e-15).contains(&v)));
        let max = probs.iter().cloned().fold(f64::MIN, f64::max);
        let min = probs.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 0.95).abs() < 1e-15 && (min - 0.05).abs() < 1e-15);
        let local_max = (0..16)
            .filter(|&i| {
                let left = if i == 0 { f64::MIN } else { probs[i - 1] };
                let right = if i == 15 { f64::MIN } else { probs[i + 1] };
                probs[i] > left && probs[i] > right
            })
            .count();
        assert_eq!(local_max, 1);
        assert!(sawtooth_params(1).is_err());
    }

    #[test]
    fn prob_examples() {
        let p = ProductBernoulli::new(vec![0.9]).unwrap();
        assert!((p.prob(&"1".parse().unwrap()).unwrap() - 0.9).abs() < 1e-15);
        let u = DenseTable::uniform(3).unwrap();
        assert_eq!(u.prob(&"010".parse().unwrap()).unwrap(), 0.125);
        let p = ProductBernoulli::new(vec![0.9, 0.2]).unwrap();
        assert!((p.prob(&"10".parse().unwrap()).unwrap() - 0.72).abs() < 1e-15);
        assert!(p.prob(&"1".parse().unwrap()).is_err());
    }

    #[test]
    fn product_table_agrees_and_sums_to_one() {
        let mut rng = seeded(3);
        for d in 1..=10 {
            let probs: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.99)).collect();
            let p = ProductBernoulli::new(probs).unwrap();
            let t = p.to_table().unwrap();
            let sum: f64 = t.masses().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for x in t.states() {
                assert!((t.prob(&x).unwrap() - p.prob(&x).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn table_validation() {
        assert!(DenseTable::new(1, vec![0.5, 0.4]).is_err());
        assert!(DenseTable::new(1, vec![1.5, -0.5]).is_err());
        let (t, rescaled) = DenseTable::normalized(1, vec![1.0, 3.0]).unwrap();
        assert!(rescaled);
        assert_eq!(t.masses(), &[0.25, 0.75]);
        assert!(matches!(DenseTable::uniform(25), Err(Error::EnumerationLimit { .. })));
    }

    #[test]
    fn sample_near_degenerate_product() {
        let p: Distribution = ProductBernoulli::new(vec![0.999]).unwrap().into();
        let n = 10_000;
        let s = p.sample(n, &mut seeded(11)).unwrap();
        let freq = s.bit_means()[0];
        let sigma = (0.999 * 0.001 / n as f64).sqrt();
        assert!((freq - 0.999).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn sample_point_mass_table() {
        let x0: BitState = "101".parse().unwrap();
        let t: Distribution = DenseTable::delta(&x0).unwrap().into();
        let s = t.sample(500, &mut seeded(1)).unwrap();
        assert!(s.samples().iter().all(|x| *x == x0));
    }

    #[test]
    fn sample_uniform_table_frequencies() {
        let t: Distribution = DenseTable::uniform(2).unwrap().into();
        let n = 100_000;
        let s = t.sample(n, &mut seeded(5)).unwrap();
        let h = s.histogram().unwrap();
        let sigma = (0.25 * 0.75 / n as f64).sqrt();
        for &m in h.masses() {
            assert!((m - 0.25).abs() < 3.0 * sigma, "freq {m}");
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p: Distribution = sawtooth_params(8).unwrap().into();
        let a = p.sample(100, &mut seeded(9)).unwrap();
        let b = p.sample(100, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(p.sample(0, &mut seeded(9)).is_err());
    }

    #[test]
    fn empirical_lines_roundtrip() {
        let set = EmpiricalSet::new(vec!["01".parse().unwrap(), "11".parse().unwrap()]).unwrap();
        assert_eq!(EmpiricalSet::from_lines(&set.to_lines()).unwrap(), set);
        assert!(EmpiricalSet::from_lines("").is_err());
        assert!(EmpiricalSet::from_lines("01\n011\n").is_err());
    }
}
