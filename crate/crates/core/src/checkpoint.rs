//! Binary checkpoints.
//!
//! ```text
//! "SNIPCKPT"  u32 version  u32 header_len  header (JSON)
//! parameters  f32 little-endian, in header order
//! [optimizer] first then second moments, f64 little-endian
//! sha256 of every preceding byte (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes};
use crate::model::{SpotterConfig, SpotterParams};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SNIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: SpotterConfig,
    epoch: usize,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: usize,
    pub params: SpotterParams,
    pub optimizer: Option<AdamState>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn config(&self) -> &SpotterConfig {
        self.params.config()
    }

    /// Parameter values exactly as stored.
    pub fn payload(&self) -> Vec<u8> {
        self.params
            .tensors()
            .iter()
            .flat_map(|t| t.to_f32())
            .flat_map(f32::to_le_bytes)
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config().clone(),
            epoch: self.epoch,
            params: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step_count(),
            }),
        };
        let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload());
        if let Some(a) = &self.optimizer {
            for m in a.first_moment().iter().chain(a.second_moment()) {
                for v in m {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 + 32 {
            return Err(bad("truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, at: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("missing SNIPCKPT header"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?).map_err(|e| bad(e.to_string()))?;
        let mut named = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n = p.shape.iter().product();
            named.push((p.name.clone(), Tensor::from_f32(p.shape.clone(), &r.f32s(n)?)?));
        }
        let params = SpotterParams::from_named(&header.config, named)?;
        let optimizer = match header.optimizer {
            None => None,
            Some(o) => {
                let sizes: Vec<usize> = params.tensors().iter().map(Tensor::len).collect();
                let read = |r: &mut Reader| -> Result<Vec<Vec<f64>>> { sizes.iter().map(|&n| r.f64s(n)).collect() };
                let m = read(&mut r)?;
                let v = read(&mut r)?;
                Some(AdamState::from_parts(o.lr, (o.beta1, o.beta2), o.eps, o.step, m, v)?)
            }
        };
        if r.at != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            epoch: header.epoch,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }

    /// Loads and requires the stored configuration to equal `expected`.
    pub fn load_matching(path: &Path, expected: &SpotterConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config() != expected {
            return Err(Error::ConfigMismatch(format!(
                "{} was written for {:?}, run configured for {:?}",
                path.display(),
                ck.config(),
                expected
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SpotterConfig {
        SpotterConfig {
            input_dim: 6,
            embed_dim: 8,
            embed_blocks: 1,
            transformer_blocks: 1,
            pyramid_blocks: 1,
            heads: 2,
            window: 6,
            duration: 24,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let params = SpotterParams::init(&cfg(), 3).unwrap();
        let mut adam = AdamState::new(params.tensors(), 1e-3);
        let mut p = params.clone();
        let grads: Vec<Vec<f64>> = p.tensors().iter().map(|t| vec![0.1; t.len()]).collect();
        adam.step(p.tensors_mut(), &grads).unwrap();
        let ck = Checkpoint {
            epoch: 4,
            params: p,
            optimizer: Some(adam.clone()),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.epoch, 4);
        assert_eq!(back.payload(), ck.payload());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.optimizer.unwrap(), adam);
    }

    #[test]
    fn without_optimizer() {
        let ck = Checkpoint {
            epoch: 0,
            params: SpotterParams::init(&cfg(), 1).unwrap(),
            optimizer: None,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.optimizer.is_none());
        assert_eq!(back.params.names(), ck.params.names());
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint {
            epoch: 0,
            params: SpotterParams::init(&cfg(), 1).unwrap(),
            optimizer: None,
        };
        let mut bytes = ck.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn config_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = Checkpoint {
            epoch: 2,
            params: SpotterParams::init(&cfg(), 1).unwrap(),
            optimizer: None,
        };
        ck.save(&path).unwrap();
        assert!(Checkpoint::load_matching(&path, &cfg()).is_ok());
        let other = SpotterConfig { window: 4, ..cfg() };
        assert!(matches!(
            Checkpoint::load_matching(&path, &other),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
