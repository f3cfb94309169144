//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    b"LAMACKPT"
//! version  u32
//! config   d_model, heads, layers, d_ff, window, num_events, top_k: u64; dropout: f64; pooling: u8
//! meta     seed: u64, epochs: u64, final_loss: f64
//! tensors  count: u32, then per tensor rows: u64, cols: u64, rows*cols f64
//! vocab    count: u64, then per entry key_len: u32, key bytes (UTF-8), id: u32
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Pooling};
use crate::pipeline::{EventId, Vocabulary};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"LAMACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    /// Fails unless the stored model config equals `expected`.
    pub fn ensure_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {:?}, requested {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.d_model, c.heads, c.layers, c.d_ff, c.window, c.num_events, c.top_k] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.push(c.pooling.code());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.epochs.to_le_bytes());
        out.extend_from_slice(&self.meta.final_loss.to_le_bytes());

        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        out.extend_from_slice(&(self.vocab.len() as u64).to_le_bytes());
        for (i, key) in self.vocab.keys().iter().enumerate() {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&EventId::from_class_index(i).0.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let dropout = r.f64()?;
        let pooling = Pooling::from_code(r.u8()?)
            .ok_or_else(|| Error::CorruptCheckpoint("unknown pooling code".into()))?;
        let config = ModelConfig {
            d_model: dims[0],
            heads: dims[1],
            layers: dims[2],
            d_ff: dims[3],
            window: dims[4],
            num_events: dims[5],
            top_k: dims[6],
            dropout,
            pooling,
        };
        config
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(format!("stored config invalid: {e}")))?;
        let meta = TrainingMeta {
            seed: r.u64()?,
            epochs: r.u64()?,
            final_loss: r.f64()?,
        };

        let count = r.u32()? as usize;
        let expected = ModelParams::expected_shapes(&config);
        if count != expected.len() {
            return Err(Error::ConfigMismatch(format!(
                "{count} tensors stored, config declares {}",
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (i, shape) in expected.iter().enumerate() {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            if (rows, cols) != *shape {
                return Err(Error::ConfigMismatch(format!(
                    "tensor {i} stored as {rows}x{cols}, config declares {}x{}",
                    shape.0, shape.1
                )));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f64()?);
            }
            tensors.push(Matrix::from_vec(rows, cols, data)?);
        }
        let params = ModelParams::from_tensors(&config, tensors)?;

        let n = r.u64()? as usize;
        if n != config.num_events {
            return Err(Error::ConfigMismatch(format!(
                "vocabulary of {n} events, config declares {}",
                config.num_events
            )));
        }
        let mut keys = Vec::with_capacity(n);
        for i in 0..n {
            let len = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("vocabulary key is not UTF-8".into()))?
                .to_string();
            let id = r.u32()?;
            if id != EventId::from_class_index(i).0 {
                return Err(Error::CorruptCheckpoint(format!(
                    "vocabulary id {id} out of sequence at entry {i}"
                )));
            }
            keys.push(key);
        }
        let vocab = Vocabulary::from_keys(keys);
        if vocab.len() != n {
            return Err(Error::CorruptCheckpoint("duplicate vocabulary keys".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
            meta,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and requires its model config to equal `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.ensure_config(expected)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint(d: usize) -> Checkpoint {
        let vocab = Vocabulary::from_keys(["E1", "E2", "E3", "Ω"]);
        let config = ModelConfig {
            d_model: d,
            heads: 2,
            layers: 2,
            d_ff: 2 * d,
            window: 4,
            num_events: vocab.len(),
            top_k: 2,
            dropout: 0.1,
            pooling: Pooling::Last,
        };
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(d as u64)).unwrap();
        Checkpoint {
            config,
            vocab,
            params,
            meta: TrainingMeta {
                seed: 7,
                epochs: 5,
                final_loss: 0.125,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = checkpoint(8);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let w = [EventId(0), EventId(1), EventId(4), EventId(2)];
        let a = forward(&w, &ck.params, &ck.config, None).unwrap();
        let b = forward(&w, &back.params, &back.config, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = checkpoint(8).to_bytes();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::CorruptCheckpoint(_))
            ));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = checkpoint(8).to_bytes();
        bytes[8] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn requested_config_must_match() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.ckpt");
        let big = checkpoint(16);
        save_checkpoint(&path, &big).unwrap();
        let small = checkpoint(8).config;
        assert!(matches!(load_checkpoint_for(&path, &small), Err(Error::ConfigMismatch(_))));
        assert!(load_checkpoint_for(&path, &big.config).is_ok());
    }

    #[test]
    fn declared_shapes_are_enforced() {
        let mut bytes = checkpoint(8).to_bytes();
        // d_model field follows magic + version; claim d=6 while tensors are 8 wide
        bytes[12..20].copy_from_slice(&6u64.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_checkpoint("/nonexistent/x.ckpt"), Err(Error::Io(_))));
    }
}
