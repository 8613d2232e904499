//! Binary checkpoint container for named tensors.
//!
//! Layout (all integers little-endian):
//!   magic "TDCK" | format version u32 | tensor count u32
//!   per tensor: name length u16 | UTF-8 name | rank u8 | dims u32 each |
//!               raw f32 payload
//!
//! Save -> load round-trips are bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn save(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for entry in entries {
        let name = entry.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Shape(format!("tensor name too long: {}", entry.name)));
        }
        let numel: usize = entry.shape.iter().product();
        if numel != entry.data.len() {
            return Err(Error::Shape(format!(
                "tensor '{}' has {} values for shape {:?}",
                entry.name,
                entry.data.len(),
                entry.shape
            )));
        }
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[entry.shape.len() as u8])?;
        for dim in &entry.shape {
            out.write_all(&(*dim as u32).to_le_bytes())?;
        }
        for v in &entry.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<TensorEntry>> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let mut input = BufReader::new(file);
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Data(format!("{}: truncated checkpoint header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?} (not a checkpoint)",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    input.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        input.read_exact(&mut u16buf)?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Data(format!("{}: tensor name is not UTF-8", path.display())))?;
        let mut rank_buf = [0u8; 1];
        input.read_exact(&mut rank_buf)?;
        let mut shape = Vec::with_capacity(rank_buf[0] as usize);
        for _ in 0..rank_buf[0] {
            input.read_exact(&mut u32buf)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        input.read_exact(&mut payload).map_err(|_| {
            Error::Data(format!("{}: truncated payload for tensor '{name}'", path.display()))
        })?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(TensorEntry { name, shape, data });
    }
    Ok(entries)
}

/// Pull one named tensor out of a loaded checkpoint, checking its shape.
pub fn take<'a>(
    entries: &'a [TensorEntry],
    name: &str,
    shape: &[usize],
) -> Result<&'a TensorEntry> {
    let entry = entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor '{name}'")))?;
    if entry.shape != shape {
        return Err(Error::Shape(format!(
            "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
            entry.shape, shape
        )));
    }
    Ok(entry)
}
