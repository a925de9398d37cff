//! Single-file tensor archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then raw little-endian `f32` tensor data. The header holds caller
//! metadata plus a directory of `(name, shape, offset)` entries, with offsets
//! counted in `f32` elements from the start of the data block.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CPRSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes atomically via a sibling temporary file.
pub fn write_archive(path: &Path, meta: Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += t.numel();
    }
    let header = serde_json::to_vec(&Header { meta, tensors: entries })?;
    let mut buf = Vec::with_capacity(20 + header.len() + 4 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads an archive, returning the metadata and tensors in stored order.
pub fn read_archive(path: &Path) -> Result<(Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint archive"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start =
        20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| ckpt_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
    let data = &bytes[data_start..];
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let (a, b) = (4 * e.offset, 4 * (e.offset + n));
        if b > data.len() {
            return Err(ckpt_err(path, format!("tensor {} extends past end of file", e.name)));
        }
        let vals = data[a..b].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((e.name, Tensor::new(e.shape, vals)));
    }
    Ok((header.meta, out))
}
