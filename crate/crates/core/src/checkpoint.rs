//! Binary checkpoint format.
//!
//! ```text
//! magic      4 bytes   "WZSR"
//! version    u32 LE
//! meta_len   u64 LE    length of the UTF-8 TOML metadata block
//! meta       meta_len bytes
//! count      u32 LE    number of parameter tensors
//! manifest   count x { name_len u16 LE, name, rank u8, dims u64 LE x rank, offset u64 LE }
//! payload_len u64 LE   in bytes
//! payload    little-endian f64 values, tensors back to back in manifest order
//! ```
//!
//! Offsets are byte offsets into the payload and strictly increase.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, ParamTensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WZSR";
pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = concat!("wzsr ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub tool_version: String,
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_tau: f64,
    /// Whether an auxiliary prior of the other kind follows the primary networks.
    #[serde(default)]
    pub aux_prior: bool,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = toml::to_string(&self.meta).expect("metadata is representable as TOML");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in self.store.iter() {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in self.store.iter() {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = r.len()?;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let meta: CheckpointMeta = toml::from_str(meta_text)
            .map_err(|e| Error::Checkpoint(format!("metadata: {}", e.message())))?;

        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let offset = r.len()?;
            manifest.push((name, shape, offset));
        }
        let payload_len = r.len()?;
        let payload = r.take(payload_len)?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }

        let mut store = ParamStore::new();
        let mut expected = 0usize;
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            if offset != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` at offset {offset}, expected {expected}"
                )));
            }
            let end = offset + 8 * n;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` exceeds payload"
                )));
            }
            let values = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.push(ParamTensor::new(name, shape, values)?);
            expected = end;
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint("payload has unreferenced bytes".into()));
        }
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scenario;
    use crate::model::{PriorKind, RefinementModel};
    use crate::stochastic::RngState;

    fn sample() -> Checkpoint {
        let mut cfg =
            RunConfig::for_scenario(Scenario::FourFour, PriorKind::Conditional, 15.0, 0.01, 3);
        cfg.model.hidden = 4;
        let model = RefinementModel::init(&cfg.model, &mut RngState::new(3)).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                tool_version: TOOL_VERSION.into(),
                seed: 3,
                epochs_completed: 2,
                final_tau: 0.2,
                aux_prior: false,
                config: cfg,
            },
            store: model.store,
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Checkpoint(_))
        ));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::Version { found: 2, .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
