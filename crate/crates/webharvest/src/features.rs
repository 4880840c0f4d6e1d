//! Feature vector files.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! u32 image_id_width  u32 dim  u64 count
//! count × ( image_id_width bytes of ASCII id, dim × f32 )
//! ```
//!
//! The CSV alternative has one `id,v1,…,vD` row per image; a leading row
//! starting with `id,` and lines starting with `#` are skipped. Files ending
//! in `.csv` are read as CSV, anything else as binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use webharvest_core::model::{FeatureVector, ImageId};

use crate::io::{write_atomic, IoError};

const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: row {row}: {message}")]
    Row {
        path: PathBuf,
        row: usize,
        message: String,
    },
}

pub type FeatureMap = BTreeMap<ImageId, FeatureVector>;

pub fn read_features(path: &Path) -> Result<FeatureMap, FeatureError> {
    let bytes = fs::read(path).map_err(|source| IoError::Io {
        path: path.into(),
        source,
    })?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        log::warn!("{}: feature file is empty", path.display());
        return Ok(FeatureMap::new());
    }
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        parse_csv(path, &bytes)
    } else {
        parse_binary(path, &bytes)
    }
}

/// Writes vectors in id order; the format follows the file extension.
pub fn write_features<'a>(
    path: &Path,
    vectors: impl IntoIterator<Item = &'a FeatureVector>,
) -> Result<(), FeatureError> {
    let mut rows: Vec<&FeatureVector> = vectors.into_iter().collect();
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let dim = rows.first().map_or(0, |v| v.dim());
    let width = rows.first().map_or(32, |v| v.image_id.as_str().len());
    for v in &rows {
        if v.dim() != dim {
            return Err(FeatureError::Format {
                path: path.into(),
                message: format!("vector {} has dim {}, expected {dim}", v.image_id, v.dim()),
            });
        }
        if !v.is_finite() {
            return Err(FeatureError::Format {
                path: path.into(),
                message: format!("vector {} has non-finite entries", v.image_id),
            });
        }
    }
    let csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    write_atomic(path, |out| {
        if csv {
            for v in &rows {
                write!(out, "{}", v.image_id)?;
                for x in &v.values {
                    write!(out, ",{x}")?;
                }
                out.write_all(b"\n")?;
            }
        } else {
            out.write_all(&(width as u32).to_le_bytes())?;
            out.write_all(&(dim as u32).to_le_bytes())?;
            out.write_all(&(rows.len() as u64).to_le_bytes())?;
            for v in &rows {
                out.write_all(v.image_id.as_str().as_bytes())?;
                for &x in &v.values {
                    out.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    })?;
    Ok(())
}

fn parse_binary(path: &Path, bytes: &[u8]) -> Result<FeatureMap, FeatureError> {
    let format = |message: String| FeatureError::Format {
        path: path.into(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(format(format!("truncated header ({} bytes)", bytes.len())));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if count > 0 && dim == 0 {
        return Err(format("dim must be positive".into()));
    }
    let row_len = width + 4 * dim;
    let expected = row_len
        .checked_mul(count)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| format("header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(format(format!(
            "header promises {count} rows of {row_len} bytes ({expected} bytes total) but file has {}",
            bytes.len()
        )));
    }
    let mut out = FeatureMap::new();
    for (row, chunk) in bytes[HEADER_LEN..].chunks_exact(row_len).enumerate() {
        let id = std::str::from_utf8(&chunk[..width]).unwrap_or("");
        let values = chunk[width..]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        insert(path, row + 1, &mut out, id, values)?;
    }
    Ok(out)
}

fn parse_csv(path: &Path, bytes: &[u8]) -> Result<FeatureMap, FeatureError> {
    let text = std::str::from_utf8(bytes).map_err(|e| FeatureError::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    let mut out = FeatureMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("id,")) {
            continue;
        }
        let row = i + 1;
        let mut cols = line.split(',');
        let id = cols.next().unwrap_or("").trim();
        let values = cols
            .map(|c| c.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FeatureError::Row {
                path: path.into(),
                row,
                message: e.to_string(),
            })?;
        if *dim.get_or_insert(values.len()) != values.len() {
            return Err(FeatureError::Row {
                path: path.into(),
                row,
                message: format!("{} values, expected {}", values.len(), dim.unwrap()),
            });
        }
        insert(path, row, &mut out, id, values)?;
    }
    Ok(out)
}

fn insert(
    path: &Path,
    row: usize,
    out: &mut FeatureMap,
    id: &str,
    values: Vec<f64>,
) -> Result<(), FeatureError> {
    let err = |message: String| FeatureError::Row {
        path: path.into(),
        row,
        message,
    };
    let image_id: ImageId = id.parse().map_err(|e| err(format!("{e}")))?;
    if values.is_empty() {
        return Err(err("no values".into()));
    }
    let v = FeatureVector { image_id, values };
    if !v.is_finite() {
        return Err(err("non-finite value".into()));
    }
    if out.insert(v.image_id.clone(), v).is_some() {
        return Err(err(format!("duplicate id {id}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs() -> Vec<FeatureVector> {
        (0..5u32)
            .map(|i| FeatureVector {
                image_id: format!("{:032x}", i + 10).parse().unwrap(),
                values: vec![f64::from(i) * 0.5, -1.25, 3.0],
            })
            .collect()
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["f.bin", "f.csv"] {
            let path = dir.path().join(name);
            write_features(&path, &vecs()).unwrap();
            let back = read_features(&path).unwrap();
            assert_eq!(back.into_values().collect::<Vec<_>>(), vecs(), "{name}");
        }
        let len = fs::metadata(dir.path().join("f.bin")).unwrap().len();
        assert_eq!(len, 16 + 5 * (32 + 12));
    }

    #[test]
    fn empty_file_gives_empty_map() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        fs::write(&path, b"").unwrap();
        assert!(read_features(&path).unwrap().is_empty());
    }

    #[test]
    fn nan_row_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, format!("{:032x},1,2\n{:032x},NaN,2\n", 1, 2)).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatureError::Row { row: 2, .. })
        ));

        let mut bad = vecs();
        bad[1].values[0] = f64::NAN;
        assert!(write_features(&dir.path().join("g.bin"), &bad).is_err());
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        fs::write(&path, format!("id,v1,v2\n{:032x},1,2\n{:032x},1\n", 1, 2)).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatureError::Row { row: 3, .. })
        ));
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_features(&path, &vecs()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatureError::Format { .. })
        ));
    }
}
