//! Recorded responses on disk.
//!
//! ```text
//! <root>/keywords/<encoded class name>.txt   one keyword per line
//! <root>/<engine>/<encoded query>.txt        one URL per line, rank = line
//! ```
//!
//! Names are percent-encoded, leaving only RFC 3986 unreserved characters.

use std::fs;
use std::path::{Path, PathBuf};

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

use super::{AcquireError, EngineConfig, KeywordService, SearchBackend};

const COMPONENT: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'_')
    .remove(b'.')
    .remove(b'~');

pub fn fixture_file(root: &Path, dir: &str, query: &str) -> PathBuf {
    root.join(dir)
        .join(format!("{}.txt", utf8_percent_encode(query, COMPONENT)))
}

fn read_lines(path: &Path) -> Result<Vec<String>, AcquireError> {
    let text = fs::read_to_string(path).map_err(|source| match source.kind() {
        std::io::ErrorKind::NotFound => AcquireError::FixtureMissing(path.to_path_buf()),
        _ => AcquireError::Io {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[derive(Debug, Clone)]
pub struct FixtureKeywords {
    root: PathBuf,
}

impl FixtureKeywords {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureKeywords { root: root.into() }
    }
}

impl KeywordService for FixtureKeywords {
    fn keywords(&self, phrase: &str, _k: usize) -> Result<Vec<String>, AcquireError> {
        read_lines(&fixture_file(&self.root, "keywords", phrase))
    }
}

#[derive(Debug, Clone)]
pub struct FixtureSearch {
    root: PathBuf,
}

impl FixtureSearch {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FixtureSearch { root: root.into() }
    }
}

impl SearchBackend for FixtureSearch {
    fn search(&self, query: &str, engine: &EngineConfig) -> Result<Vec<String>, AcquireError> {
        read_lines(&fixture_file(&self.root, &engine.tag, query))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::search_images;

    #[test]
    fn names_are_percent_encoded() {
        let p = fixture_file(Path::new("fx"), "bing", "siberian husky/pup");
        assert_eq!(p, Path::new("fx/bing/siberian%20husky%2Fpup.txt"));
    }

    #[test]
    fn top_k_truncation_and_empty_files() {
        let dir = tempfile::tempdir().unwrap();
        let engine = EngineConfig::new("yahoo");
        let write = |q: &str, n: usize| {
            let path = fixture_file(dir.path(), "yahoo", q);
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            let body: String = (1..=n)
                .map(|i| format!("https://img.example/{q}/{i}.jpg\n"))
                .collect();
            fs::write(path, body).unwrap();
        };
        write("many", 350);
        write("few", 50);
        write("none", 0);
        let backend = FixtureSearch::new(dir.path());
        let many = search_images(&backend, "many", &engine).unwrap();
        assert_eq!(many.len(), 200);
        assert_eq!(
            many.iter().map(|r| r.result_rank).collect::<Vec<_>>(),
            (1..=200).collect::<Vec<_>>()
        );
        assert_eq!(search_images(&backend, "few", &engine).unwrap().len(), 50);
        assert!(search_images(&backend, "none", &engine).unwrap().is_empty());
        let err = search_images(&backend, "absent", &engine).unwrap_err();
        assert!(err.is_config() && !err.is_retriable());
    }
}
