//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "KGSELCKP"
//! version    u32
//! config     u32 length + UTF-8 JSON {"model": ModelConfig, "settings": {..}}
//! hash       32 bytes SHA-256 of the config bytes
//! rng_seed   u64
//! count      u32
//! per parameter:
//!   name     u32 length + UTF-8
//!   dtype    u8 (0 = f64)
//!   ndim     u32, then ndim × u64 dims
//!   values   product(dims) × f64
//! ```
//!
//! Loading parses the whole buffer before building anything, so a
//! truncated or corrupted file never yields partial state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numeric::{Array, ParameterStore};
use crate::scoring_models::{Model, ModelConfig, ModelKind};

const MAGIC: &[u8; 8] = b"KGSELCKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    settings: BTreeMap<String, String>,
}

/// A model plus the resolved run settings it was produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub settings: BTreeMap<String, String>,
}

fn config_bytes(model: &ModelConfig, settings: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(&ConfigBlock {
        model: model.clone(),
        settings: settings.clone(),
    })?)
}

/// Hex SHA-256 of the canonical config block.
pub fn config_hash(model: &ModelConfig, settings: &BTreeMap<String, String>) -> Result<String> {
    let bytes = config_bytes(model, settings)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: Model, settings: BTreeMap<String, String>) -> Self {
        Self { model, settings }
    }

    pub fn config_hash(&self) -> Result<String> {
        config_hash(&self.model.config, &self.settings)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = config_bytes(&self.model.config, &self.settings)?;
        let store = &self.model.store;
        let mut out = Vec::with_capacity(64 + cfg.len() + store.num_values() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&Sha256::digest(&cfg));
        out.extend_from_slice(&store.rng_seed().to_le_bytes());
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (name, a) in store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. With `expected` set, the parameters are checked
    /// against that model kind's schema instead of the stored one.
    pub fn from_bytes(bytes: &[u8], expected: Option<ModelKind>) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let cfg = r.take(cfg_len)?;
        let stored_hash = r.take(32)?;
        if Sha256::digest(cfg).as_slice() != stored_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let block: ConfigBlock = serde_json::from_slice(cfg)?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut store = ParameterStore::new(seed);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?
                .to_owned();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("`{name}`: unsupported dtype {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: truncated values")))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, Array::new(shape, data)?)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        let mut config = block.model;
        if let Some(kind) = expected {
            config.kind = kind;
        }
        let model = Model::from_parts(config, store)?;
        Ok(Self {
            model,
            settings: block.settings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<ModelKind>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: ModelKind) -> Checkpoint {
        let model = Model::init(ModelConfig::new(kind, 10, 4, 6), 99).unwrap();
        let mut settings = BTreeMap::new();
        settings.insert("seed".to_owned(), "99".to_owned());
        Checkpoint::new(model, settings)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut ck = sample(ModelKind::TriLstm);
        ck.model.store.by_id_mut(0).data_mut()[0] = 0.1 + 0.2;
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, None).unwrap();
        assert_eq!(back, ck);
        for ((_, a), (_, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config_hash().unwrap(), ck.config_hash().unwrap());
    }

    #[test]
    fn truncated_file_fails() {
        let bytes = sample(ModelKind::DualLstm).to_bytes().unwrap();
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut], None).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn version_and_hash_checked() {
        let mut bytes = sample(ModelKind::Bow).to_bytes().unwrap();
        bytes[8] = 2;
        let err = Checkpoint::from_bytes(&bytes, None).unwrap_err();
        assert!(err.to_string().contains("version"));

        let mut bytes = sample(ModelKind::Bow).to_bytes().unwrap();
        let cfg_start = 16;
        let pos = bytes[cfg_start..].iter().position(|&b| b == b'4').unwrap() + cfg_start;
        bytes[pos] = b'5';
        let err = Checkpoint::from_bytes(&bytes, None).unwrap_err();
        assert!(err.to_string().contains("hash"));
    }

    #[test]
    fn dual_loaded_as_tri_is_refused() {
        let bytes = sample(ModelKind::DualLstm).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes, Some(ModelKind::TriLstm)).unwrap_err();
        assert!(err.to_string().contains("missing parameter `lstm_assertion"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes, Some(ModelKind::DualLstm)).is_ok());
    }
}
