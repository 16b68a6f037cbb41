//! Bulk array files and JSON sidecars.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `values` as raw little-endian f64 and returns the SHA-256 of the
/// file contents.
pub fn write_f64_le(path: &Path, values: &[f64]) -> Result<String> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_f64_le(path: &Path, expected_sha: Option<&str>) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::config(format!("{} is not a whole number of f64 values", path.display())));
    }
    if let Some(want) = expected_sha {
        let got = sha256_hex(&bytes);
        if got != want {
            return Err(Error::config(format!("{} has sha256 {got}, manifest says {want}", path.display())));
        }
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Temp file in the same directory followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_with_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let v = vec![1.5, -0.0, f64::NAN, 1e300];
        let sha = write_f64_le(&p, &v).unwrap();
        let back = read_f64_le(&p, Some(&sha)).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[0], 1.5);
        assert!(back[2].is_nan());
        assert!(read_f64_le(&p, Some("00")).is_err());
    }

    #[test]
    fn sha_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
