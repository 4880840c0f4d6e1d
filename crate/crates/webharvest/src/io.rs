//! JSON Lines files: manifests, replacement logs and harvest records.
//!
//! Every file starts with one header object followed by one object per line.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use webharvest_core::manifest::{DatasetManifest, ManifestEntry, Strategy};
use webharvest_core::noise::{NoiseKind, Replacement, ReplacementLog};

pub const MANIFEST_SCHEMA: u32 = 1;

const ENTRY_FIELDS: [&str; 9] = [
    "id", "label", "path", "class", "origin", "engine", "rank", "url", "phash",
];
const HEADER_FIELDS: [&str; 4] = ["schema", "strategy", "seed", "config_hash"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: missing header line")]
    MissingHeader { path: PathBuf },
    #[error("{path}: unsupported schema version {found}")]
    Schema { path: PathBuf, found: u32 },
    #[error("{path}:{line}: duplicate image id {id}")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        id: String,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Writes to `<path>.tmp` and renames, so readers never see half a file.
pub fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        body(&mut out)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| IoError::io(path, e))
}

fn write_line<T: Serialize + ?Sized>(out: &mut dyn Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::other)?;
    out.write_all(b"\n")
}

/// Writes a header and one line per item.
pub fn write_jsonl<H: Serialize, T: Serialize>(
    path: &Path,
    header: &H,
    items: &[T],
) -> Result<(), IoError> {
    write_atomic(path, |out| {
        write_line(out, header)?;
        items.iter().try_for_each(|item| write_line(out, item))
    })
}

/// Non-blank lines of a file with their 1-based line numbers.
fn lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String), IoError>>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, line)| line.map(|l| (i + 1, l)).map_err(|e| IoError::io(&owned, e)))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty())))
}

fn parse<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::Malformed {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

/// Reads a file written by [`write_jsonl`].
pub fn read_jsonl<H: DeserializeOwned, T: DeserializeOwned>(
    path: &Path,
) -> Result<(H, Vec<T>), IoError> {
    let mut it = lines(path)?;
    let (n, first) = it
        .next()
        .ok_or_else(|| IoError::MissingHeader { path: path.into() })??;
    let header = parse(path, n, &first)?;
    let items = it
        .map(|r| r.and_then(|(n, text)| parse(path, n, &text)))
        .collect::<Result<Vec<T>, _>>()?;
    Ok((header, items))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    schema: u32,
    strategy: Strategy,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), IoError> {
    let header = ManifestHeader {
        schema: MANIFEST_SCHEMA,
        strategy: manifest.strategy,
        seed: manifest.seed,
        config_hash: manifest.config_hash.clone(),
    };
    write_jsonl(path, &header, &manifest.entries)
}

fn warn_unknown(
    path: &Path,
    line: usize,
    value: &serde_json::Value,
    known: &[&str],
    seen: &mut BTreeSet<String>,
) {
    if let Some(obj) = value.as_object() {
        for key in obj.keys() {
            if !known.contains(&key.as_str()) && seen.insert(key.clone()) {
                log::warn!("{}:{line}: ignoring unknown field {key:?}", path.display());
            }
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let malformed = |line, e: serde_json::Error| IoError::Malformed {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    };
    let mut unknown = BTreeSet::new();
    let mut it = lines(path)?;
    let (n, first) = it
        .next()
        .ok_or_else(|| IoError::MissingHeader { path: path.into() })??;
    let value: serde_json::Value = serde_json::from_str(&first).map_err(|e| malformed(n, e))?;
    warn_unknown(path, n, &value, &HEADER_FIELDS, &mut unknown);
    let header: ManifestHeader = serde_json::from_value(value).map_err(|e| malformed(n, e))?;
    if header.schema != MANIFEST_SCHEMA {
        return Err(IoError::Schema {
            path: path.into(),
            found: header.schema,
        });
    }

    let mut manifest = DatasetManifest::new(header.strategy, header.seed);
    manifest.config_hash = header.config_hash;
    let mut ids = HashSet::new();
    for r in it {
        let (n, text) = r?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(n, e))?;
        warn_unknown(path, n, &value, &ENTRY_FIELDS, &mut unknown);
        let entry: ManifestEntry = serde_json::from_value(value).map_err(|e| malformed(n, e))?;
        if !ids.insert(entry.id.clone()) {
            return Err(IoError::DuplicateId {
                path: path.into(),
                line: n,
                id: entry.id.to_string(),
            });
        }
        manifest.entries.push(entry);
    }
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct LogHeader {
    kind: NoiseKind,
    fraction: f64,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

pub fn write_replacement_log(
    log: &ReplacementLog,
    config_hash: Option<&str>,
    path: &Path,
) -> Result<(), IoError> {
    let header = LogHeader {
        kind: log.kind,
        fraction: log.fraction,
        seed: log.seed,
        config_hash: config_hash.map(String::from),
    };
    write_jsonl(path, &header, &log.replacements)
}

pub fn read_replacement_log(path: &Path) -> Result<ReplacementLog, IoError> {
    let (header, replacements): (LogHeader, Vec<Replacement>) = read_jsonl(path)?;
    Ok(ReplacementLog {
        kind: header.kind,
        fraction: header.fraction,
        seed: header.seed,
        replacements,
    })
}

/// Pretty JSON document, atomically written.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    write_atomic(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value).map_err(std::io::Error::other)?;
        out.write_all(b"\n")
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Malformed {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}
