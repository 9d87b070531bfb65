//! Flat binary parameter container.
//!
//! Layout (all integers little-endian `u32`):
//! `"SWFT"`, version, count, then per tensor: name length, UTF-8 name,
//! rank, extents, and the values as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWFT";
pub const VERSION: u32 = 1;

/// Writes named tensors in order.
pub fn write_entries<T: Element, W: Write>(out: &mut W, entries: &[(&str, &Tensor<T>)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &e in tensor.shape() {
            out.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(|e| TensorError::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_entries<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| TensorError::Checkpoint("missing header".into()))?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(input, "version")?;
    if version != VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(input, "count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(input, "name length")? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name).map_err(|_| TensorError::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(input, "rank")? as usize;
        let shape = (0..rank).map(|_| read_u32(input, "extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw).map_err(|_| TensorError::Checkpoint(format!("truncated values of {name:?}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}

/// Saves every parameter value of `store`.
pub fn save<T: Element>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let entries: Vec<(&str, &Tensor<T>)> = store.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let mut out = BufWriter::new(File::create(path)?);
    write_entries(&mut out, &entries)?;
    out.flush()?;
    Ok(())
}

/// Loads parameter values into `store`; names and shapes must match exactly.
pub fn load<T: Element>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let entries = read_entries(&mut BufReader::new(File::open(path)?))?;
    store.load(&entries)
}
