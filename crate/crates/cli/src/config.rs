//! Run configuration: one TOML file drives every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dmpm::model::{AdamWConfig, ModelConfig};
use dmpm::rng::derive_seed;
use dmpm::sampler::{FlipKind, FlipSchedule, SamplerKind, SamplerSpec, ScheduleKind, TimeSchedule};
use dmpm::state::{sawtooth_params, ENUMERATION_LIMIT};
use dmpm::training::{Dataset, LossSpec, TrainConfig};
use dmpm::{DenseTable, Distribution, EmpiricalSet, ProductBernoulli};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub d: usize,
    pub lambda: f64,
    pub t_f: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
    pub validate: ValidateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d: 8,
            lambda: 1.0,
            t_f: 3.0,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
            validate: ValidateSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Product law whose bit probabilities rise linearly from 0.05 to 0.95 and fall back.
    Sawtooth,
    /// Product law with explicit `probs`.
    Product,
    /// Whitespace-separated masses of all `2^d` states (index order); rescaled
    /// with a warning when they do not sum to one.
    TableFile,
    /// A sample file with one `0/1` string per line.
    EmpiricalFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub probs: Option<Vec<f64>>,
    pub path: Option<PathBuf>,
    /// Points per training epoch (redrawn each epoch for analytic laws) and
    /// size of the sample file written by `gen-data`.
    pub samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { kind: DatasetKind::Sawtooth, probs: None, path: None, samples: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub blocks: usize,
    pub width: usize,
    pub time_embed_dim: usize,
    /// Initialization seed; derived from the master seed when absent.
    pub seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { blocks: 2, width: 128, time_embed_dim: 32, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Named preset (`l2`, `ce`, `l2_e`, `l2_ce`, `e_ce`, `l2_e_ce`, optional
    /// `_w` suffix); overrides the explicit weights.
    pub preset: Option<String>,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w_scaled: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        Self { preset: None, w1: 1.0, w2: 0.0, w3: 0.0, w_scaled: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub ema: Option<f64>,
    /// Training-log row written every `log_every` steps.
    pub log_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self { steps: base.steps, batch_size: base.batch_size, optimizer: base.optimizer, ema: None, log_every: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub schedule: ScheduleKind,
    pub steps: usize,
    /// Early-stopping time `η` (0 disables it).
    pub early_stop: f64,
    pub flip_kind: FlipKind,
    /// Total flips for the flip-schedule sampler; defaults to `d`.
    pub flip_total: Option<usize>,
    pub n: usize,
    pub micro_step: Option<f64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Discrete,
            schedule: ScheduleKind::Cosine,
            steps: 30,
            early_stop: 0.0,
            flip_kind: FlipKind::Linear,
            flip_total: None,
            n: 20_000,
            micro_step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub swd_directions: usize,
    /// Size of the fresh reference draw from the data law.
    pub reference_samples: usize,
    pub allow_lineage_mismatch: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { swd_directions: 1000, reference_samples: 20_000, allow_lineage_mismatch: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    /// Dimensions of the random-law sweep (each at most 10).
    pub dims: Vec<usize>,
    pub instances: usize,
    pub steps: Vec<usize>,
    pub t_f: f64,
    pub schedule: ScheduleKind,
    /// Early-stopping times checked for each instance in addition to `η = 0`.
    pub early_stop: Vec<f64>,
    /// Largest dimension of the TV early-stopping grid.
    pub tv_max_dim: usize,
    /// Number of `η` values in the TV early-stopping grid.
    pub tv_grid: usize,
    /// Score shift injected into the oracle for the fault-injection report
    /// (0 disables it).
    pub corrupt_shift: f64,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            dims: vec![3],
            instances: 20,
            steps: vec![25, 100, 400],
            t_f: 4.0,
            schedule: ScheduleKind::Linear,
            early_stop: vec![0.1],
            tv_max_dim: 6,
            tv_grid: 20,
            corrupt_shift: 0.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Checks everything that can be checked without touching data files.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > dmpm::state::MAX_DIM {
            bail!("d = {} is out of range 1..={}", self.d, dmpm::state::MAX_DIM);
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            bail!("lambda must be positive, got {}", self.lambda);
        }
        if !(self.t_f > 0.0 && self.t_f.is_finite()) {
            bail!("t_f must be positive, got {}", self.t_f);
        }
        self.loss_spec()?;
        self.model_config().validate()?;
        if self.train.batch_size == 0 || self.train.log_every == 0 {
            bail!("train.batch_size and train.log_every must be positive");
        }
        if self.dataset.samples == 0 {
            bail!("dataset.samples must be positive");
        }
        match self.dataset.kind {
            DatasetKind::Product if self.dataset.probs.is_none() => bail!("dataset kind product needs probs"),
            DatasetKind::TableFile | DatasetKind::EmpiricalFile if self.dataset.path.is_none() => {
                bail!("dataset kind {:?} needs a path", self.dataset.kind)
            }
            _ => {}
        }
        if self.sampler.n == 0 {
            bail!("sampler.n must be positive");
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> Result<LossSpec> {
        let l = &self.loss;
        let spec = match &l.preset {
            Some(name) => LossSpec::preset(name)?,
            None => LossSpec::new(l.w1, l.w2, l.w3, l.w_scaled)?,
        };
        Ok(spec)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            blocks: self.model.blocks,
            width: self.model.width,
            time_embed_dim: self.model.time_embed_dim,
            seed: self.model.seed.unwrap_or_else(|| derive_seed(self.seed, "model", 0)),
        }
    }

    pub fn train_config(&self, start_step: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer.clone(),
            ema: self.train.ema,
            start_step,
        }
    }

    pub fn sampler_spec(&self) -> Result<SamplerSpec> {
        let s = &self.sampler;
        let schedule = || -> Result<TimeSchedule> {
            Ok(if s.early_stop > 0.0 {
                TimeSchedule::early_stop(s.schedule, s.steps, self.t_f, s.early_stop)?
            } else {
                TimeSchedule::new(s.schedule, s.steps, self.t_f)?
            })
        };
        Ok(match s.kind {
            SamplerKind::Continuous => SamplerSpec::Continuous { micro_step: s.micro_step },
            SamplerKind::PerCoord => SamplerSpec::PerCoord { micro_step: s.micro_step },
            SamplerKind::Discrete => SamplerSpec::Discrete(schedule()?),
            SamplerKind::Denoise => SamplerSpec::Denoise(schedule()?),
            SamplerKind::Flip => {
                let sched = schedule()?;
                let flips = FlipSchedule::new(s.flip_kind, &sched, s.flip_total.unwrap_or(self.d));
                SamplerSpec::Flip(sched, flips)
            }
        })
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// Hash identifying the data law: the dataset section, `d`, and the
    /// contents of any referenced file.
    pub fn data_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.d.to_le_bytes());
        h.update(toml::to_string(&self.dataset)?.as_bytes());
        if let Some(path) = &self.dataset.path {
            h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
        }
        Ok(hex::encode(h.finalize()))
    }

    /// The configured data source, as a law when one is available.
    pub fn load_data(&self) -> Result<LoadedData> {
        let d = self.d;
        let data = match self.dataset.kind {
            DatasetKind::Sawtooth => LoadedData::Law(sawtooth_params(d)?.into()),
            DatasetKind::Product => {
                let probs = self.dataset.probs.clone().unwrap_or_default();
                if probs.len() != d {
                    bail!("dataset.probs has {} entries, expected d = {d}", probs.len());
                }
                LoadedData::Law(ProductBernoulli::new(probs)?.into())
            }
            DatasetKind::TableFile => {
                let path = self.dataset.path.as_ref().expect("validated");
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let mass = text
                    .split_whitespace()
                    .map(|w| w.parse::<f64>().with_context(|| format!("bad mass {w:?} in {}", path.display())))
                    .collect::<Result<Vec<_>>>()?;
                let (table, rescaled) = DenseTable::normalized(d, mass)?;
                if rescaled {
                    log::warn!("masses in {} did not sum to one and were rescaled", path.display());
                }
                LoadedData::Law(table.into())
            }
            DatasetKind::EmpiricalFile => {
                let path = self.dataset.path.as_ref().expect("validated");
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let set = EmpiricalSet::from_lines(&text)?;
                if set.dim() != d {
                    bail!("samples in {} have dimension {}, expected d = {d}", path.display(), set.dim());
                }
                LoadedData::Samples(set)
            }
        };
        Ok(data)
    }
}

pub enum LoadedData {
    Law(Distribution),
    Samples(EmpiricalSet),
}

impl LoadedData {
    /// The data law; for a sample file this is its histogram.
    pub fn law(&self) -> Result<Distribution> {
        match self {
            LoadedData::Law(dist) => Ok(dist.clone()),
            LoadedData::Samples(set) => {
                if set.dim() > ENUMERATION_LIMIT {
                    bail!("the empirical law of d = {} samples cannot be tabulated", set.dim());
                }
                Ok(set.histogram()?.into())
            }
        }
    }

    pub fn dataset(&self, epoch_size: usize) -> Dataset {
        match self {
            LoadedData::Law(dist) => Dataset::Generative { dist: dist.clone(), epoch_size },
            LoadedData::Samples(set) => Dataset::Fixed(set.clone()),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("d = 4\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[sampler]\nstepz = 4\n").is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg = RunConfig::from_toml("d = 4\n[sampler]\nkind = \"flip\"\n").unwrap();
        assert_eq!(cfg.d, 4);
        assert_eq!(cfg.t_f, 3.0);
        assert_eq!(cfg.sampler.schedule, ScheduleKind::Cosine);
        match cfg.sampler_spec().unwrap() {
            SamplerSpec::Flip(_, f) => assert_eq!(f.total, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_loss_weights_fail_validation() {
        let cfg = RunConfig::from_toml("[loss]\nw1 = 0.0\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.sampler.steps += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.data_hash().unwrap(), b.data_hash().unwrap());
        b.d = 4;
        assert_ne!(a.data_hash().unwrap(), b.data_hash().unwrap());
    }

    #[test]
    fn sawtooth_law_matches_dimension() {
        let cfg = RunConfig { d: 5, ..RunConfig::default() };
        let law = cfg.load_data().unwrap().law().unwrap();
        assert_eq!(law.dim(), 5);
    }
}
