//! Binary embedding cache: one JSON header line, then row-major little-endian
//! floats. `f32le` is the interchange dtype; `f64le` is used where a
//! checkpoint must restore bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "f64le")]
    F64Le,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::F64Le => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub dim: usize,
    pub count: usize,
    pub dtype: Dtype,
    pub seed: u64,
    pub config_hash: String,
}

pub fn write_cache(path: &Path, header: &CacheHeader, rows: &[f64]) -> Result<()> {
    if rows.len() != header.dim * header.count {
        return Err(AirError::Param(format!(
            "cache header promises {}x{} values, got {}",
            header.count,
            header.dim,
            rows.len()
        )));
    }
    let mut buf = serde_json::to_vec(header)?;
    buf.push(b'\n');
    buf.reserve(rows.len() * header.dtype.width());
    for &x in rows {
        match header.dtype {
            Dtype::F32Le => buf.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64Le => buf.extend_from_slice(&x.to_le_bytes()),
        }
    }
    let mut f = File::create(path).map_err(|e| AirError::io(path, e))?;
    f.write_all(&buf).map_err(|e| AirError::io(path, e))
}

/// Reads a cache, rejecting it when `expected_hash` is given and differs.
pub fn read_cache(path: &Path, expected_hash: Option<&str>) -> Result<(CacheHeader, Vec<f64>)> {
    let corrupt = |reason: String| AirError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let f = File::open(path).map_err(|e| AirError::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| AirError::io(path, e))?;
    let header: CacheHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if let Some(expected) = expected_hash {
        if header.config_hash != expected {
            return Err(AirError::HashMismatch {
                expected: expected.to_string(),
                found: header.config_hash,
            });
        }
    }
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| AirError::io(path, e))?;
    let w = header.dtype.width();
    let expected_len = header.dim * header.count * w;
    if body.len() != expected_len {
        return Err(corrupt(format!(
            "expected {expected_len} payload bytes, found {}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(w)
        .map(|c| match header.dtype {
            Dtype::F32Le => f64::from(f32::from_le_bytes(c.try_into().unwrap())),
            Dtype::F64Le => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dtype: Dtype) -> CacheHeader {
        CacheHeader {
            dim: 3,
            count: 2,
            dtype,
            seed: 9,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn f64_roundtrip_is_exact_and_f32_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![0.1, -2.5, 1.0 / 3.0, 7.0, 1e-8, -0.0];
        let p = dir.path().join("a.bin");
        write_cache(&p, &header(Dtype::F64Le), &rows).unwrap();
        let (h, back) = read_cache(&p, Some("abc")).unwrap();
        assert_eq!(h, header(Dtype::F64Le));
        assert_eq!(back, rows);

        write_cache(&p, &header(Dtype::F32Le), &rows).unwrap();
        let (_, back) = read_cache(&p, None).unwrap();
        for (a, b) in back.iter().zip(&rows) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
        }
    }

    #[test]
    fn hash_mismatch_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_cache(&p, &header(Dtype::F32Le), &[0.0; 6]).unwrap();
        assert!(matches!(
            read_cache(&p, Some("zzz")),
            Err(AirError::HashMismatch { .. })
        ));
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_cache(&p, None), Err(AirError::Corrupt { .. })));
        assert!(write_cache(&p, &header(Dtype::F32Le), &[0.0; 5]).is_err());
    }
}
