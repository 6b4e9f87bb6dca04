//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, progress, history, parameter names and shapes), then raw
//! little-endian `f64` blocks, and a trailing SHA-256 of everything before
//! it. Per parameter the blocks are values, Adam first moment, Adam second
//! moment; the best-validation snapshot values follow when present.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, TrainConfig};
use crate::compute::{Matrix, ModelParams, Parameter};
use crate::error::{MsgcaError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MSGCACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights kept from the epoch with the best validation MCC.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub valid_mcc: f64,
    pub values: Vec<Matrix>,
}

/// Everything needed to resume training or to evaluate a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: ModelParams,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct BestHeader {
    epoch: usize,
    valid_mcc: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    step: u64,
    history: Vec<EpochRecord>,
    params: Vec<ParamShape>,
    best: Option<BestHeader>,
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    /// Parameters of the best-validation epoch, or the current ones when no
    /// epoch has been evaluated.
    pub fn best_params(&self) -> ModelParams {
        let mut params = self.params.clone();
        if let Some(best) = &self.best {
            for (p, v) in params.iter_mut().zip(&best.values) {
                *p.values_mut() = v.clone();
            }
        }
        params
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            history: self.history.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamShape {
                    name: p.name.clone(),
                    rows: p.values().nrows(),
                    cols: p.values().ncols(),
                })
                .collect(),
            best: self.best.as_ref().map(|b| BestHeader {
                epoch: b.epoch,
                valid_mcc: b.valid_mcc,
            }),
        };
        let json = serde_json::to_vec(&header).map_err(|e| MsgcaError::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in self.params.iter() {
            put_matrix(&mut buf, p.values());
            put_matrix(&mut buf, &p.adam_m);
            put_matrix(&mut buf, &p.adam_v);
        }
        if let Some(best) = &self.best {
            for v in &best.values {
                put_matrix(&mut buf, v);
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let corrupt = |m: &str| MsgcaError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(corrupt("file too short"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(MsgcaError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified file)"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| corrupt("header extends past end of file"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut cursor = 20 + header_len;
        let mut take = |rows: usize, cols: usize| -> Result<Matrix> {
            let n = rows * cols;
            let raw = body
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| corrupt("value block extends past end of file"))?;
            cursor += 8 * n;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(Array2::from_shape_vec((rows, cols), vals).expect("length matches shape"))
        };
        let mut params = ModelParams::new();
        for s in &header.params {
            let mut p = Parameter::new(s.name.clone(), take(s.rows, s.cols)?);
            p.adam_m = take(s.rows, s.cols)?;
            p.adam_v = take(s.rows, s.cols)?;
            params.insert_parameter(p)?;
        }
        let best = match header.best {
            Some(b) => Some(BestSnapshot {
                epoch: b.epoch,
                valid_mcc: b.valid_mcc,
                values: header
                    .params
                    .iter()
                    .map(|s| take(s.rows, s.cols))
                    .collect::<Result<_>>()?,
            }),
            None => None,
        };
        if cursor != body.len() {
            return Err(corrupt("trailing bytes after value blocks"));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            params,
            best,
            history: header.history,
        })
    }
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| MsgcaError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| MsgcaError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MsgcaError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let config = TrainConfig {
            model: crate::ModelConfig {
                d: 3,
                ws: 4,
                doc_dim: 2,
                ..Default::default()
            },
            ..TrainConfig::default()
        };
        let mut params = init_params(&config.model, 9).unwrap();
        for p in params.iter_mut() {
            p.adam_m.fill(0.25);
            p.adam_v.fill(1.0 / 3.0);
        }
        let best = BestSnapshot {
            epoch: 2,
            valid_mcc: 0.125,
            values: params.iter().map(|p| p.values() * 2.0).collect(),
        };
        Checkpoint {
            config,
            epoch: 3,
            step: 42,
            params,
            best: Some(best),
            history: vec![],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.best, c.best);
        for (a, b) in c.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.values(), b.values());
            assert_eq!(a.adam_m, b.adam_m);
            assert_eq!(a.adam_v, b.adam_v);
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(MsgcaError::CorruptCheckpoint(_))
            ));
        }
    }

    #[test]
    fn other_version_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(MsgcaError::CheckpointVersion { found: 7, .. })
        ));
    }
}
