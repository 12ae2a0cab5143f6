//! Tensor container file.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   b"FQTENSR1"
//! header_len   u64 LE    length of the JSON header in bytes
//! header       UTF-8 JSON {"meta": <any>, "tensors": [{"name", "shape", "offset", "len"}]}
//! payload      f64 LE    row-major tensor data; offsets/lengths count f64 elements
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const MAGIC: &[u8; 8] = b"FQTENSR1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write(
    mut out: impl Write,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: entries,
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read(mut input: impl Read) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let end = e.offset + e.len;
        if end > values.len() {
            return Err(Error::Format(format!("tensor {} runs past payload", e.name)));
        }
        let t = Tensor::new(e.shape, values[e.offset..end].to_vec())
            .map_err(|err| Error::Format(format!("tensor {}: {err}", e.name)))?;
        out.push((e.name, t));
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let a = Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::vector(vec![std::f64::consts::PI]);
        let mut buf = Vec::new();
        write(
            &mut buf,
            serde_json::json!({"k": 1}),
            &[("a".into(), &a), ("b".into(), &b)],
        )
        .unwrap();
        let (meta, ts) = read(buf.as_slice()).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(ts[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(ts[0].1, a);
        assert_eq!(ts[1].1, b);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read(&b"NOTMAGIC\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}
