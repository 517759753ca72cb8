//! Binary checkpoint container.
//!
//! ```text
//! "MVAE" | version u32 | meta_len u32 | meta JSON | count u32 |
//!   { name_len u32 | name | dtype u8 (0 = f64) | rank u32 | dims u64… | payload f64… }*
//! | crc32 u32
//! ```
//! All integers and floats are little-endian; the CRC covers every preceding byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CvaeArch, CvaeModel, ModelInfo};
use crate::autodiff::{NdArray, RunningStats};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MVAE";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const MEAN_SUFFIX: &str = ".running_mean";
const VAR_SUFFIX: &str = ".running_var";

#[derive(Serialize, Deserialize)]
struct Metadata {
    arch: CvaeArch,
    info: ModelInfo,
}

fn put_array(out: &mut Vec<u8>, name: &str, value: &NdArray) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
    for &d in value.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in value.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_model(model: &CvaeModel) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata {
        arch: model.arch().clone(),
        info: model.info.clone(),
    })?;
    let stats: Vec<(&str, &RunningStats)> = model.running_stats().collect();
    let mut out = Vec::with_capacity(64 + meta.len() + model.num_parameters() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&((model.params().len() + 2 * stats.len()) as u32).to_le_bytes());
    for (name, value) in model.param_names().iter().zip(model.params()) {
        put_array(&mut out, name, value);
    }
    for (name, rs) in stats {
        put_array(&mut out, &format!("{name}{MEAN_SUFFIX}"), &NdArray::from_vec(rs.mean.clone()));
        put_array(&mut out, &format!("{name}{VAR_SUFFIX}"), &NdArray::from_vec(rs.var.clone()));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_model(model: &CvaeModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_model(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CvaeModel> {
    read_model(&fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self) -> Result<(String, NdArray)> {
        let at = self.pos as u64;
        let name_len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(name_len, "name")?)
            .map_err(|_| Error::format(at + 4, "parameter name is not UTF-8"))?
            .to_string();
        let dtype_at = self.pos as u64;
        let dtype = self.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::format(dtype_at, format!("unsupported dtype {dtype} for {name}")));
        }
        let rank = self.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(dtype_at + 1, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("dimension")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| Error::format(self.pos as u64, format!("payload of {name} exceeds the file")))?;
        let payload = self.take(len * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        Ok((name, NdArray::new(shape, data)?))
    }
}

pub fn read_model(bytes: &[u8]) -> Result<CvaeModel> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "checkpoint is truncated"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, not a model checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::format(body.len() as u64, "checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos as u64;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(meta_at, format!("metadata: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        arrays.push(r.array()?);
    }
    if r.pos != body.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after the parameter table"));
    }

    let mut params = Vec::new();
    let mut stats: Vec<(String, RunningStats)> = Vec::new();
    let mut pending_mean: Option<(String, Vec<f64>)> = None;
    for (name, value) in arrays {
        if let Some(base) = name.strip_suffix(MEAN_SUFFIX) {
            pending_mean = Some((base.to_string(), value.into_data()));
        } else if let Some(base) = name.strip_suffix(VAR_SUFFIX) {
            match pending_mean.take() {
                Some((mean_base, mean)) if mean_base == base => stats.push((
                    base.to_string(),
                    RunningStats {
                        mean,
                        var: value.into_data(),
                    },
                )),
                _ => return Err(Error::contract(format!("running variance {name} has no matching mean"))),
            }
        } else {
            params.push((name, value));
        }
    }
    CvaeModel::from_parts(meta.arch, params, stats, meta.info)
}
