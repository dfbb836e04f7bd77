//! Named-tensor container: a human-readable text header describing every
//! entry (name, shape, dtype) followed by the raw little-endian data in
//! header order. The header makes checkpoints diffable and greppable; the
//! payload keeps them exact.
//!
//! ```text
//! croprckpt v1
//! meta model={"depth":8,...}
//! tensor embed.weight 48x64 f64
//! tensor embed.bias 1x64 f64
//! data
//! <raw little-endian bytes>
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CroprError, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "croprckpt v1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// An ordered set of named tensors plus free-form metadata lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint<T> {
    meta: Vec<(String, String)>,
    entries: Vec<CheckpointEntry<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint { meta: Vec::new(), entries: Vec::new() }
    }

    /// Attach a metadata key/value pair. Keys must be single tokens; values
    /// may be anything without a newline (compact JSON fits).
    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(CroprError::checkpoint(format!(
                "meta key {key:?} must be a single non-empty token"
            )));
        }
        if value.contains('\n') || value.contains('\r') {
            return Err(CroprError::checkpoint(format!("meta value for {key:?} contains a newline")));
        }
        if let Some(slot) = self.meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
        } else {
            self.meta.push((key.to_string(), value.to_string()));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, data: Vec<T>) -> Result<()> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(CroprError::checkpoint(format!(
                "tensor name {name:?} must be a single non-empty token"
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(CroprError::checkpoint(format!("duplicate tensor name {name:?}")));
        }
        if data.len() != rows * cols {
            return Err(CroprError::checkpoint(format!(
                "tensor {name:?} has {} elements but shape {rows}x{cols} needs {}",
                data.len(),
                rows * cols
            )));
        }
        self.entries.push(CheckpointEntry { name: name.to_string(), rows, cols, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entries(&self) -> &[CheckpointEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total parameter element count across entries.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    fn header(&self) -> String {
        let mut h = String::new();
        h.push_str(MAGIC);
        h.push('\n');
        for (k, v) in &self.meta {
            h.push_str(&format!("meta {k}={v}\n"));
        }
        for e in &self.entries {
            h.push_str(&format!("tensor {} {}x{} {}\n", e.name, e.rows, e.cols, T::DTYPE));
        }
        h.push_str("data\n");
        h
    }

    /// Exact size in bytes of the serialized form.
    pub fn byte_size(&self) -> usize {
        self.header().len() + self.param_count() * T::BYTE_WIDTH
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(self.header().as_bytes())?;
        for e in &self.entries {
            for &v in &e.data {
                w.write_all(&v.to_le_bytes_vec())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.byte_size());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        // Split header from payload at the line after "data".
        let mut line_start = 0;
        let mut lines: Vec<&str> = Vec::new();
        let mut payload_start = None;
        while line_start < bytes.len() {
            let rel_end = bytes[line_start..].iter().position(|&b| b == b'\n');
            let Some(rel_end) = rel_end else {
                break;
            };
            let line = std::str::from_utf8(&bytes[line_start..line_start + rel_end])
                .map_err(|_| CroprError::checkpoint("header is not valid UTF-8"))?;
            line_start += rel_end + 1;
            if line == "data" {
                payload_start = Some(line_start);
                break;
            }
            lines.push(line);
        }
        let payload_start = payload_start
            .ok_or_else(|| CroprError::checkpoint("missing 'data' line before payload"))?;

        let mut iter = lines.into_iter();
        match iter.next() {
            Some(l) if l == MAGIC => {}
            other => {
                return Err(CroprError::checkpoint(format!(
                    "bad magic line {:?}, expected {MAGIC:?}",
                    other.unwrap_or("")
                )))
            }
        }

        let mut ckpt = Checkpoint::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        for line in iter {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| CroprError::checkpoint(format!("malformed meta line {line:?}")))?;
                ckpt.set_meta(k, v)?;
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split_whitespace();
                let (name, shape, dtype) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
                    (Some(n), Some(s), Some(d), None) => (n, s, d),
                    _ => {
                        return Err(CroprError::checkpoint(format!(
                            "malformed tensor line {line:?}"
                        )))
                    }
                };
                if dtype != T::DTYPE {
                    return Err(CroprError::checkpoint(format!(
                        "tensor {name:?} has dtype {dtype} but this reader expects {}",
                        T::DTYPE
                    )));
                }
                let (r, c) = shape
                    .split_once('x')
                    .ok_or_else(|| CroprError::checkpoint(format!("malformed shape {shape:?}")))?;
                let rows: usize = r
                    .parse()
                    .map_err(|_| CroprError::checkpoint(format!("malformed shape {shape:?}")))?;
                let cols: usize = c
                    .parse()
                    .map_err(|_| CroprError::checkpoint(format!("malformed shape {shape:?}")))?;
                shapes.push((name.to_string(), rows, cols));
            } else {
                return Err(CroprError::checkpoint(format!("unrecognized header line {line:?}")));
            }
        }

        let expected: usize = shapes.iter().map(|(_, r, c)| r * c * T::BYTE_WIDTH).sum();
        let payload = &bytes[payload_start..];
        if payload.len() != expected {
            return Err(CroprError::checkpoint(format!(
                "payload has {} bytes but header describes {expected}",
                payload.len()
            )));
        }
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(T::from_le_bytes_slice(&payload[offset..offset + T::BYTE_WIDTH]));
                offset += T::BYTE_WIDTH;
            }
            ckpt.push(&name, rows, cols, data)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let mut c = Checkpoint::new();
        c.set_meta("model", r#"{"depth":2}"#).unwrap();
        c.push("w", 2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-9, -7.25]).unwrap();
        c.push("b", 1, 3, vec![0.5, 0.25, -0.125]).unwrap();
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(bytes.len(), c.byte_size());
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta("model"), Some(r#"{"depth":2}"#));
        assert_eq!(back.get("w").unwrap().data[5], -7.25);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = sample();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::<f64>::load(&path).unwrap(), c);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c: Checkpoint<f64> = Checkpoint::new();
        c.push("w", 1, 1, vec![1.0]).unwrap();
        assert!(c.push("w", 1, 1, vec![2.0]).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(cut),
            Err(CroprError::Checkpoint(_))
        ));
    }

    #[test]
    fn wrong_dtype_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes),
            Err(CroprError::Checkpoint(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(Checkpoint::<f64>::from_bytes(b"not a checkpoint\ndata\n").is_err());
    }

    #[test]
    fn header_is_readable_text() {
        let bytes = sample().to_bytes();
        let text = std::str::from_utf8(&bytes[..60]).unwrap();
        assert!(text.starts_with("croprckpt v1\n"));
        assert!(text.contains("tensor w 2x3 f64"));
    }
}
