//! Raw little-endian blob helpers shared by feature packs and checkpoints.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_i32(path: &Path, values: impl IntoIterator<Item = i32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(i32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_words(path: &Path, expected: usize, field: &str) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            field,
            format!(
                "expected {expected} entries ({} bytes), found {} bytes",
                expected * 4,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

/// Reads `expected` finite f32 values; any size mismatch or non-finite entry
/// is reported against `field`.
pub fn read_f32(path: &Path, expected: usize, field: &str) -> Result<Vec<f32>> {
    let words = read_words(path, expected, field)?;
    let mut out = Vec::with_capacity(expected);
    for (i, w) in words.into_iter().enumerate() {
        let v = f32::from_le_bytes(w);
        if !v.is_finite() {
            return Err(Error::format(field, format!("non-finite value at index {i}")));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn read_i32(path: &Path, expected: usize, field: &str) -> Result<Vec<i32>> {
    Ok(read_words(path, expected, field)?
        .into_iter()
        .map(i32::from_le_bytes)
        .collect())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(field, e.to_string()))
}
