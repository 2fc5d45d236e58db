//! SSK1 parameter archive: magic header, JSON index, then a flat
//! little-endian f64 payload. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SSK1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Index {
    version: u32,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
    len: usize,
}

/// Writes named tensors in name order.
pub fn save_checkpoint(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut index = Index { version: VERSION, entries: Vec::with_capacity(entries.len()) };
    let mut offset = 0usize;
    for (name, tensor) in entries {
        index.entries.push(IndexEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
            len: tensor.numel(),
        });
        offset += tensor.numel();
    }
    let index_json = serde_json::to_vec(&index)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(index_json.len() as u64).to_le_bytes())?;
    file.write_all(&index_json)?;
    for tensor in entries.values() {
        for v in tensor.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?} (not an SSK1 archive)",
            path.display(),
            magic
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let index_len = u64::from_le_bytes(len_bytes) as usize;
    let mut index_json = vec![0u8; index_len];
    file.read_exact(&mut index_json)?;
    let index: Index = serde_json::from_slice(&index_json)?;
    if index.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: index version {} unsupported",
            path.display(),
            index.version
        )));
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{}: payload not f64-aligned", path.display())));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut out = BTreeMap::new();
    for entry in index.entries {
        let end = entry.offset + entry.len;
        if end > values.len() {
            return Err(Error::Checkpoint(format!(
                "{}: entry {} spans past payload",
                path.display(),
                entry.name
            )));
        }
        let tensor = Tensor::new(entry.shape, values[entry.offset..end].to_vec())
            .map_err(|e| Error::Checkpoint(format!("entry {}: {e}", entry.name)))?;
        out.insert(entry.name, tensor);
    }
    Ok(out)
}
