//! Binary checkpoint format.
//!
//! ```text
//! "GVTN"                  4 bytes
//! version                 u32
//! config length, bytes    u32, UTF-8 `key = value` text
//! optimizer step          u64
//! record count            u32
//! record*                 u32 name length, name bytes, u32 rank,
//!                         u64 extent × rank, f64 × numel
//! ```
//!
//! Integers and floats are little-endian. Parameter records are named as in
//! [`ModelParams`]; Adam moments use the prefixes `optim.m/` and `optim.v/`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GvtNet, ModelParams, NetConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::OptimState;

pub const MAGIC: &[u8; 4] = b"GVTN";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub params: ModelParams,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn from_model(model: &GvtNet, optim: Option<&OptimState>) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            optim: optim.cloned(),
        }
    }

    pub fn into_model(self) -> Result<GvtNet> {
        GvtNet::from_parts(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let step = self.optim.as_ref().map_or(0, |o| o.t);
        out.extend_from_slice(&step.to_le_bytes());

        let mut records: Vec<(String, &Tensor)> =
            self.params.iter().map(|(k, t)| (k.clone(), t)).collect();
        if let Some(o) = &self.optim {
            records.extend(o.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t)));
            records.extend(o.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t)));
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = NetConfig::from_text(cfg_text)?;
        let step = r.u64()?;
        let count = r.u32()? as usize;

        let mut params = BTreeMap::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
            let numel = numel
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("record `{name}` is truncated")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data)?;
            let slot = if let Some(rest) = name.strip_prefix(M_PREFIX) {
                m.insert(rest.to_string(), t)
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                v.insert(rest.to_string(), t)
            } else {
                params.insert(name.clone(), t)
            };
            if slot.is_some() {
                return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        let params = ModelParams::from_map(params);
        params.check_structure(&config)?;
        let optim = if m.is_empty() && v.is_empty() {
            None
        } else {
            Some(OptimState { m, v, t: step })
        };
        Ok(Self {
            config,
            params,
            optim,
        })
    }

    /// Writes via a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Atomic file replacement: write `path.tmp`, sync, rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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
