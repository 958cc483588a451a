//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats 64-bit little-endian unless noted):
//!
//! ```text
//! magic "DMPMCKPT" (8 bytes) | version u32
//! config: d, blocks, width, time_embed_dim, seed
//! meta:   lambda f64, t_f f64, d, w1 f64, w2 f64, w3 f64, w_scaled, seed, step
//! run config: byte length, UTF-8 bytes
//! parameter count, parameters f64...
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DenoiserModel, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DMPMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub lambda: f64,
    pub t_f: f64,
    pub d: usize,
    pub loss_weights: [f64; 3],
    pub w_scaled: bool,
    pub seed: u64,
    pub step: u64,
    /// Serialized run configuration the model was trained with (may be empty).
    pub run_config: String,
}

impl CheckpointMeta {
    /// Fails unless the checkpoint was trained for the given `λ`, `T_f` and `d`.
    pub fn ensure_compatible(&self, lambda: f64, t_f: f64, d: usize) -> Result<()> {
        if self.d != d {
            return Err(Error::ConfigMismatch(format!("checkpoint has d = {}, expected {d}", self.d)));
        }
        if self.lambda != lambda {
            return Err(Error::ConfigMismatch(format!("checkpoint has lambda = {}, expected {lambda}", self.lambda)));
        }
        if self.t_f != t_f {
            return Err(Error::ConfigMismatch(format!("checkpoint has T_f = {}, expected {t_f}", self.t_f)));
        }
        Ok(())
    }
}

pub fn write_checkpoint(model: &DenoiserModel, meta: &CheckpointMeta) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(128 + 8 * model.num_params() + meta.run_config.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.d as u64, c.blocks as u64, c.width as u64, c.time_embed_dim as u64, c.seed] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&meta.lambda.to_le_bytes());
    out.extend_from_slice(&meta.t_f.to_le_bytes());
    out.extend_from_slice(&(meta.d as u64).to_le_bytes());
    for w in meta.loss_weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&(meta.w_scaled as u64).to_le_bytes());
    out.extend_from_slice(&meta.seed.to_le_bytes());
    out.extend_from_slice(&meta.step.to_le_bytes());
    out.extend_from_slice(&(meta.run_config.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.run_config.as_bytes());
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CheckpointTruncated(format!("missing {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::CheckpointFormat(format!("{what} does not fit in usize")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(DenoiserModel, CheckpointMeta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let config = ModelConfig {
        d: r.usize("d")?,
        blocks: r.usize("blocks")?,
        width: r.usize("width")?,
        time_embed_dim: r.usize("time_embed_dim")?,
        seed: r.u64("seed")?,
    };
    let lambda = r.f64("lambda")?;
    let t_f = r.f64("t_f")?;
    let d = r.usize("meta d")?;
    let loss_weights = [r.f64("w1")?, r.f64("w2")?, r.f64("w3")?];
    let w_scaled = match r.u64("w_scaled")? {
        0 => false,
        1 => true,
        other => return Err(Error::CheckpointFormat(format!("w_scaled flag {other}"))),
    };
    let seed = r.u64("meta seed")?;
    let step = r.u64("step")?;
    let cfg_len = r.usize("run config length")?;
    let run_config = String::from_utf8(r.take(cfg_len, "run config")?.to_vec())
        .map_err(|_| Error::CheckpointFormat("run config is not UTF-8".into()))?;
    let n = r.usize("parameter count")?;
    let raw = r.take(
        n.checked_mul(8).ok_or_else(|| Error::CheckpointFormat("parameter count overflow".into()))?,
        "parameters",
    )?;
    if r.pos != bytes.len() {
        return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if config.d != d {
        return Err(Error::CheckpointDimension { model: config.d, meta: d });
    }
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let model = DenoiserModel::from_params(config, params).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let meta = CheckpointMeta { lambda, t_f, d, loss_weights, w_scaled, seed, step, run_config };
    Ok((model, meta))
}

pub fn save_checkpoint(path: &Path, model: &DenoiserModel, meta: &CheckpointMeta) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&write_checkpoint(model, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, CheckpointMeta)> {
    read_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::state::BitState;
    use rand::Rng;

    fn sample_model() -> (DenoiserModel, CheckpointMeta) {
        let mut model =
            DenoiserModel::init(ModelConfig { d: 3, blocks: 1, width: 8, time_embed_dim: 4, seed: 2 }).unwrap();
        let mut rng = seeded(1);
        for v in model.params_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
        let meta = CheckpointMeta {
            lambda: 1.0,
            t_f: 3.0,
            d: 3,
            loss_weights: [1.0, 0.0, 0.0],
            w_scaled: true,
            seed: 7,
            step: 42,
            run_config: "d = 3\n".into(),
        };
        (model, meta)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (model, meta) = sample_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &meta).unwrap();
        let (back, back_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.params(), model.params());
        let mut rng = seeded(3);
        for _ in 0..100 {
            let t = rng.random_range(0.0..3.0);
            let x = BitState::new(rng.random_range(0..8), 3).unwrap();
            assert_eq!(model.predict(t, &x).unwrap(), back.predict(t, &x).unwrap());
        }
    }

    #[test]
    fn error_variants() {
        let (model, meta) = sample_model();
        let bytes = write_checkpoint(&model, &meta);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::CheckpointFormat(_))));

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&bad), Err(Error::CheckpointVersion { found: 9, .. })));

        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::CheckpointTruncated(_))));

        let bad_meta = CheckpointMeta { d: 4, ..meta.clone() };
        assert!(matches!(
            read_checkpoint(&write_checkpoint(&model, &bad_meta)),
            Err(Error::CheckpointDimension { model: 3, meta: 4 })
        ));

        assert!(meta.ensure_compatible(1.0, 3.0, 3).is_ok());
        assert!(matches!(meta.ensure_compatible(1.0, 10.0, 3), Err(Error::ConfigMismatch(_))));
    }
}
