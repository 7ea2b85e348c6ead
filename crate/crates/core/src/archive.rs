//! Binary parameter-archive container: a JSON metadata record followed by a
//! named map of dense f64 arrays. Used for training checkpoints and for
//! encoder weight bundles. All integers little-endian; writes are atomic
//! (temp file + rename).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, ZfError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: [u8; 8] = *b"ZFCKPT\0\0";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

fn format_err(path: &Path, message: impl Into<String>) -> ZfError {
    ZfError::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Serialize metadata + parameters to `path` atomically.
pub fn write_archive<M: Serialize>(path: &Path, meta: &M, params: &ParamStore) -> Result<()> {
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| format_err(path, format!("metadata serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(DTYPE_F64);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

/// Write bytes through a sibling temp file and rename into place.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = match path.file_name() {
        Some(name) => {
            let mut n = name.to_os_string();
            n.push(".tmp");
            path.with_file_name(n)
        }
        None => return Err(format_err(path, "path has no file name")),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.path,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Read an archive written by [`write_archive`].
pub fn read_archive<M: DeserializeOwned>(path: &Path) -> Result<(M, ParamStore)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| format_err(path, format!("cannot open: {e}")))?
        .read_to_end(&mut bytes)?;
    let mut r = Reader { path, bytes, pos: 0 };

    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let meta_len = r.u64("metadata length")? as usize;
    let meta_bytes = r.take(meta_len, "metadata")?.to_vec();
    let meta: M = serde_json::from_slice(&meta_bytes)
        .map_err(|e| format_err(path, format!("metadata parse failed: {e}")))?;

    let count = r.u32("parameter count")?;
    let mut params = ParamStore::new();
    for i in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "parameter name")?.to_vec())
            .map_err(|_| format_err(path, format!("parameter {i}: name is not UTF-8")))?;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return Err(format_err(path, format!("parameter {name}: unknown dtype {dtype}")));
        }
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8, &format!("data of {name}"))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.contains(&name) {
            return Err(format_err(path, format!("duplicate parameter {name}")));
        }
        params.insert(name, Tensor::from_vec(shape, data));
    }
    if r.pos != r.bytes.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes after the last parameter", r.bytes.len() - r.pos),
        ));
    }
    Ok((meta, params))
}

/// Strict structural match of loaded parameters against an expected
/// name->shape map. Every offender is reported at once.
pub fn validate_params(
    expected: &[(String, Vec<usize>)],
    loaded: &ParamStore,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut shape_mismatch = Vec::new();
    for (name, shape) in expected {
        match loaded.get(name) {
            None => missing.push(name.clone()),
            Some(t) if t.shape() != &shape[..] => shape_mismatch.push(format!(
                "{name}: expected {:?}, got {:?}",
                shape,
                t.shape()
            )),
            _ => {}
        }
    }
    let expected_names: std::collections::BTreeSet<&str> =
        expected.iter().map(|(n, _)| n.as_str()).collect();
    let unexpected: Vec<String> = loaded
        .names()
        .filter(|n| !expected_names.contains(n.as_str()))
        .cloned()
        .collect();
    if missing.is_empty() && unexpected.is_empty() && shape_mismatch.is_empty() {
        Ok(())
    } else {
        Err(ZfError::CheckpointKeys {
            missing,
            unexpected,
            shape_mismatch,
        })
    }
}
