//! Tensor file format used by every checkpoint.
//!
//! A file is a sequence of records. Each record is one JSON header line
//! (`{"name": ..., "shape": [...]}`, newline-terminated) followed by the raw
//! little-endian 32-bit float buffer for that tensor. Readers consume records
//! until end of file. Writing is fully deterministic for fixed inputs, so
//! checkpoint bytes can be content-hashed.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("io failure: {0}")]
    Io(#[from] io::Error),
    #[error("malformed tensor header: {0}")]
    Header(String),
    #[error("tensor {name} truncated: wanted {wanted} bytes, got {got}")]
    Truncated { name: String, wanted: usize, got: usize },
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    shape: Vec<usize>,
}

/// Hex digest over named tensors (names, shapes, and exact bytes), for
/// checkpoint identity checks.
pub fn digest_tensors(entries: &[(&str, &Tensor)]) -> String {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    write_tensors(&mut buf, entries).expect("in-memory write cannot fail");
    let digest = Sha256::digest(&buf);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes named tensors as consecutive records.
pub fn write_tensors<W: Write>(
    mut w: W,
    entries: &[(&str, &Tensor)],
) -> Result<(), TensorIoError> {
    for (name, tensor) in entries {
        let header = Header { name: (*name).to_string(), shape: tensor.shape().to_vec() };
        let mut line = serde_json::to_string(&header).expect("header serializes");
        line.push('\n');
        w.write_all(line.as_bytes())?;
        let mut bytes = Vec::with_capacity(tensor.numel() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads records until end of file, preserving order.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, TensorIoError> {
    let mut out = Vec::new();
    loop {
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            match r.read(&mut byte)? {
                0 => {
                    if line.is_empty() {
                        return Ok(out);
                    }
                    return Err(TensorIoError::Header("unterminated header line".into()));
                }
                _ => {
                    if byte[0] == b'\n' {
                        break;
                    }
                    line.push(byte[0]);
                }
            }
        }
        let header: Header = serde_json::from_slice(&line)
            .map_err(|e| TensorIoError::Header(format!("{e}")))?;
        let numel: usize = header.shape.iter().product();
        let wanted = numel * 4;
        let mut bytes = vec![0u8; wanted];
        let mut got = 0usize;
        while got < wanted {
            let n = r.read(&mut bytes[got..])?;
            if n == 0 {
                return Err(TensorIoError::Truncated { name: header.name, wanted, got });
            }
            got += n;
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((header.name, Tensor::new(header.shape, data)));
    }
}

pub fn save_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<(), TensorIoError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_tensors(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, TensorIoError> {
    let file = File::open(path)?;
    read_tensors(BufReader::new(file))
}

/// Loads tensors and returns them keyed by name, erroring on duplicates.
pub fn load_tensor_map(
    path: &Path,
) -> Result<std::collections::BTreeMap<String, Tensor>, TensorIoError> {
    let mut map = std::collections::BTreeMap::new();
    for (name, tensor) in load_tensors(path)? {
        if map.insert(name.clone(), tensor).is_some() {
            return Err(TensorIoError::Header(format!("duplicate tensor name {name}")));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let a = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, f32::MIN_POSITIVE, 1e30, -0.0]);
        let b = Tensor::scalar(42.0);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a", &a), ("b", &b)]).unwrap();
        let back = read_tensors(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a");
        assert!(back[0].1.bits_equal(&a));
        assert_eq!(back[1].0, "b");
        assert!(back[1].1.bits_equal(&b));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a", &a)]).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(
            read_tensors(&buf[..]),
            Err(TensorIoError::Truncated { .. })
        ));
    }

    #[test]
    fn garbage_header_is_rejected() {
        let buf = b"not json\n".to_vec();
        assert!(matches!(read_tensors(&buf[..]), Err(TensorIoError::Header(_))));
    }

    #[test]
    fn write_is_deterministic() {
        let a = Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]);
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        write_tensors(&mut b1, &[("x", &a)]).unwrap();
        write_tensors(&mut b2, &[("x", &a)]).unwrap();
        assert_eq!(b1, b2);
    }
}
