//! Little-endian binary parameter files.
//!
//! ```text
//! magic    4 bytes  "P2SQ"
//! version  u32
//! count    u32      number of records
//! record*  name_len u32 | name bytes (utf-8) | rank u32 | dims u64 × rank | values f64 × Π dims
//! ```
//!
//! Parameter values live in one file; Adam moments go to a sibling file with
//! the same layout, holding records `<name>.m`, `<name>.v` and a scalar
//! `__step`.

use std::fs;
use std::path::{Path, PathBuf};

use super::params::ParamStore;
use super::tensor::{Tensor, MAX_RANK};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"P2SQ";
pub const VERSION: u32 = 1;
const STEP_RECORD: &str = "__step";

fn write_records(path: &Path, records: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(self.path.to_path_buf())),
        }
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

fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Truncated(path.to_path_buf()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Truncated(path.to_path_buf()));
        }
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if n.saturating_mul(8) > buf.len() {
            return Err(Error::Truncated(path.to_path_buf()));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(&dims, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Truncated(path.to_path_buf()));
    }
    Ok(out)
}

/// Path of the optimizer-state file that accompanies `params_path`.
pub fn adam_sibling(params_path: &Path) -> PathBuf {
    let mut name = params_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".adam");
    params_path.with_file_name(name)
}

/// Writes parameter values to `path` and Adam state to its sibling.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let values: Vec<(String, &Tensor)> = store.iter().map(|(n, p)| (n.to_string(), &p.value)).collect();
    write_records(path, &values)?;
    let step = Tensor::scalar(store.step() as f64);
    let mut state: Vec<(String, &Tensor)> = vec![(STEP_RECORD.to_string(), &step)];
    for (n, p) in store.iter() {
        state.push((format!("{n}.m"), &p.m));
        state.push((format!("{n}.v"), &p.v));
    }
    write_records(&adam_sibling(path), &state)
}

/// Loads parameter values only; optimizer state starts fresh.
pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, t) in read_records(path)? {
        store.insert(name, t);
    }
    Ok(store)
}

/// Loads parameter values plus Adam state from the sibling file.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut store = load_params(path)?;
    let sib = adam_sibling(path);
    for (name, t) in read_records(&sib)? {
        if name == STEP_RECORD {
            store.set_step(t.item() as u64);
            continue;
        }
        let (base, field) = name
            .rsplit_once('.')
            .ok_or_else(|| Error::Compatibility(format!("unexpected optimizer record `{name}`")))?;
        let p = store
            .get_mut(base)
            .ok_or_else(|| Error::Compatibility(format!("optimizer state for unknown parameter `{base}`")))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Compatibility(format!("optimizer state shape mismatch for `{base}`")));
        }
        match field {
            "m" => p.m = t,
            "v" => p.v = t,
            _ => return Err(Error::Compatibility(format!("unexpected optimizer record `{name}`"))),
        }
    }
    Ok(store)
}
