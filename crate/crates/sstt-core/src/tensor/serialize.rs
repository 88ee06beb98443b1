//! Checkpoint / keypoint file codec.
//!
//! Layout: an 8-byte little-endian header length, a JSON header listing
//! `{name, dtype: "f32", shape}` per tensor (plus an optional free-form
//! `meta` object), then the raw little-endian f32 payloads concatenated in
//! header order.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

use crate::error::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<HeaderEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn write_tensors(w: &mut impl Write, records: &[TensorRecord], meta: serde_json::Value) -> Result<(), Error> {
    for r in records {
        if r.numel() != r.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} does not match {} values",
                r.name,
                r.shape,
                r.data.len()
            )));
        }
    }
    let header = Header {
        tensors: records
            .iter()
            .map(|r| HeaderEntry { name: r.name.clone(), dtype: "f32".into(), shape: r.shape.clone() })
            .collect(),
        meta,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for r in records {
        for v in &r.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<(Vec<TensorRecord>, serde_json::Value), Error> {
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf).map_err(|_| Error::Checkpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut records = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("tensor {}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let mut payload = vec![0u8; n * 4];
        r.read_exact(&mut payload).map_err(|_| {
            Error::Checkpoint(format!("tensor {}: payload shorter than header-declared {n} values", entry.name))
        })?;
        let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        records.push(TensorRecord { name: entry.name.clone(), shape: entry.shape.clone(), data });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after declared payloads".into()));
    }
    Ok((records, header.meta))
}

pub fn write_tensors_to_path(
    path: &std::path::Path,
    records: &[TensorRecord],
    meta: serde_json::Value,
) -> Result<(), Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensors(&mut f, records, meta)
}

pub fn read_tensors_from_path(path: &std::path::Path) -> Result<(Vec<TensorRecord>, serde_json::Value), Error> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensors(&mut f).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_identical() {
        let records = vec![
            TensorRecord { name: "a".into(), shape: vec![2, 2], data: vec![1.0, -2.5, 3.25, 0.0] },
            TensorRecord { name: "b".into(), shape: vec![3], data: vec![0.1, 0.2, 0.3] },
        ];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &records, serde_json::json!({"step": 7})).unwrap();
        let (back, meta) = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, records);
        assert_eq!(meta["step"], 7);
        let mut buf2 = Vec::new();
        write_tensors(&mut buf2, &back, meta).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let records = vec![TensorRecord { name: "a".into(), shape: vec![4], data: vec![0.0; 4] }];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &records, serde_json::Value::Null).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensors(&mut buf.as_slice()).is_err());
    }
}
