//! Dense voxel grid file format.
//!
//! Layout (all integers little-endian):
//!   magic      8 bytes  "ZFVOXEL\0"
//!   version    u16      currently 1
//!   resolution u32      N
//!   dtype      u8       0 = u8-binary, 1 = f32-soft
//!   payload    N^3 values, row-major with x slowest and z fastest
//!
//! Binary payloads contain only {0,1}. Writes are atomic.

use std::fs;
use std::path::Path;

use crate::archive::atomic_write;
use crate::error::{Result, ZfError};
use crate::generator::VoxelGrid;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"ZFVOXEL\0";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelDtype {
    U8Binary,
    F32Soft,
}

impl VoxelDtype {
    fn tag(self) -> u8 {
        match self {
            VoxelDtype::U8Binary => 0,
            VoxelDtype::F32Soft => 1,
        }
    }

    fn from_tag(tag: u8, path: &Path) -> Result<Self> {
        match tag {
            0 => Ok(VoxelDtype::U8Binary),
            1 => Ok(VoxelDtype::F32Soft),
            other => Err(format_err(path, format!("unknown dtype tag {other}"))),
        }
    }

    fn value_size(self) -> usize {
        match self {
            VoxelDtype::U8Binary => 1,
            VoxelDtype::F32Soft => 4,
        }
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> ZfError {
    ZfError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Write a grid. U8-binary requires a hard-binarized grid (the writer does
/// not threshold for you); f32-soft accepts anything and narrows to f32.
pub fn write_voxel_file(path: &Path, grid: &VoxelGrid, dtype: VoxelDtype) -> Result<()> {
    if dtype == VoxelDtype::U8Binary && !grid.binarized() {
        return Err(ZfError::Contract(
            "u8-binary export requires a hard-binarized grid".into(),
        ));
    }
    let n = grid.resolution();
    let mut buf = Vec::with_capacity(HEADER_LEN + grid.values().numel() * dtype.value_size());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.push(dtype.tag());
    match dtype {
        VoxelDtype::U8Binary => {
            for &v in grid.values().data() {
                buf.push(if v != 0.0 { 1 } else { 0 });
            }
        }
        VoxelDtype::F32Soft => {
            for &v in grid.values().data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    atomic_write(path, &buf)
}

/// Read a file written by [`write_voxel_file`].
pub fn read_voxel_file(path: &Path) -> Result<VoxelGrid> {
    let bytes = fs::read(path).map_err(|e| format_err(path, format!("cannot read: {e}")))?;
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            path,
            format!("file too short for header: expected at least {HEADER_LEN} bytes, got {}", bytes.len()),
        ));
    }
    if bytes[0..8] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", &bytes[0..8])));
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let dtype = VoxelDtype::from_tag(bytes[14], path)?;
    let expected = HEADER_LEN + n * n * n * dtype.value_size();
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!(
                "payload size mismatch: expected {expected} bytes total, got {}",
                bytes.len()
            ),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let (values, binarized) = match dtype {
        VoxelDtype::U8Binary => {
            let mut data = Vec::with_capacity(n * n * n);
            for (i, &b) in payload.iter().enumerate() {
                match b {
                    0 => data.push(0.0),
                    1 => data.push(1.0),
                    other => {
                        return Err(format_err(
                            path,
                            format!("binary payload byte {i} is {other}, expected 0 or 1"),
                        ))
                    }
                }
            }
            (data, true)
        }
        VoxelDtype::F32Soft => (
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            false,
        ),
    };
    VoxelGrid::new(Tensor::from_vec(vec![n, n, n], values), binarized)
}
