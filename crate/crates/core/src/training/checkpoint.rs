//! `STMC` checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "STMC" | version u16 | fingerprint u64
//! config_len u32 | config JSON {"model": .., "train": ..}
//! log_len u32    | per-epoch metrics JSON
//! epoch u64 | global_step u64
//! rng: key [u8; 32] | stream u64 | word_pos u128
//! n_params u32, then per parameter: name_len u16 | name | rank u8 | dims u32 × rank
//! parameter blob: every parameter's values as f64, in manifest order
//! optimizer: step u64 | n_moments u8 | moment blobs as f64, in manifest order
//! crc32 of everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, FormatError, Result};
use crate::params::ParamSet;
use crate::rng::RngState;
use crate::tensor::{numel, Tensor};
use crate::training::{EpochMetrics, OptimizerState, TrainConfig};

pub const MAGIC: [u8; 4] = *b"STMC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub fingerprint: u64,
    pub log: Vec<EpochMetrics>,
    /// Completed epochs.
    pub epoch: u64,
    pub global_step: u64,
    pub rng: RngState,
    pub params: ParamSet,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct Configs {
    model: ModelConfig,
    train: TrainConfig,
}

/// Hash of everything that changes the training trajectory. Run-control
/// settings (epoch budget, checkpoint location) are excluded so a run can be
/// extended on resume.
pub fn fingerprint(model: &ModelConfig, train: &TrainConfig) -> u64 {
    let view = serde_json::json!({
        "model": model,
        "train": train.trajectory_view(model),
    });
    let digest = Sha256::digest(view.to_string().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl Checkpoint {
    pub fn check_fingerprint(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        let expected = fingerprint(model, train);
        if expected != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected,
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.fingerprint.to_le_bytes());
        let configs = serde_json::to_vec(&Configs {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
        })?;
        for block in [configs, serde_json::to_vec(&self.log)?] {
            b.extend_from_slice(&(block.len() as u32).to_le_bytes());
            b.extend_from_slice(&block);
        }
        b.extend_from_slice(&self.epoch.to_le_bytes());
        b.extend_from_slice(&self.global_step.to_le_bytes());
        b.extend_from_slice(&self.rng.key);
        b.extend_from_slice(&self.rng.stream.to_le_bytes());
        b.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.rank() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, _, t) in self.params.iter() {
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b.extend_from_slice(&self.optimizer.step.to_le_bytes());
        let moments = if self.optimizer.m.is_empty() { 0u8 } else { 2 };
        b.push(moments);
        for set in [&self.optimizer.m, &self.optimizer.v].into_iter().take(moments as usize) {
            for vec in set {
                for v in vec {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        Ok(b)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(FormatError::BadMagic {
                expected: MAGIC,
                found: bytes[..4].try_into().unwrap(),
            }
            .into());
        }
        if bytes.len() < 4 + 2 + 4 {
            return Err(FormatError::Truncated {
                needed: 10,
                available: bytes.len(),
            }
            .into());
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(FormatError::Version(version).into());
        }
        // The CRC covers the whole body, so verify it before trusting any length field.
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Crc { stored, computed }.into());
        }
        let mut r = Reader { bytes: body, pos: 6 };
        let fingerprint = r.u64()?;
        let configs: Configs = serde_json::from_slice(r.block()?)?;
        let log: Vec<EpochMetrics> = serde_json::from_slice(r.block()?)?;
        let epoch = r.u64()?;
        let global_step = r.u64()?;
        let rng = RngState {
            key: r.take(32)?.try_into().unwrap(),
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
        };
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| FormatError::Malformed("parameter name is not utf-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let dtype = configs.model.dtype;
        let mut params = ParamSet::new();
        for (name, shape) in manifest {
            let data = r.f64s(numel(&shape))?;
            let t = Tensor::with_dtype(shape, data, dtype).map_err(|e| FormatError::Malformed(e.to_string()))?;
            params.add(name, t);
        }
        let step = r.u64()?;
        let moments = r.take(1)?[0];
        let mut sets = Vec::new();
        for _ in 0..moments {
            let set = params
                .iter()
                .map(|(_, _, t)| r.f64s(t.len()))
                .collect::<Result<Vec<_>>>()?;
            sets.push(set);
        }
        if r.pos != body.len() {
            return Err(FormatError::Malformed(format!("{} unread bytes", body.len() - r.pos)).into());
        }
        let v = sets.pop().unwrap_or_default();
        let m = sets.pop().unwrap_or_default();
        Ok(Checkpoint {
            model_config: configs.model,
            train_config: configs.train,
            fingerprint,
            log,
            epoch,
            global_step,
            rng,
            params,
            optimizer: OptimizerState { step, m, v },
        })
    }

    /// Writes to a temporary sibling first so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()?).map_err(|e| Error::from(e).in_file(&tmp))?;
        fs::rename(&tmp, path).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Checkpoint::decode(&bytes).map_err(|e| e.in_file(path))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            FormatError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            },
        )?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(FormatError::Malformed("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
