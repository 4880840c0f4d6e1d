//! Keyword expansion, image search and downloading.
//!
//! Keyword services and search engines sit behind the [`KeywordService`] and
//! [`SearchBackend`] traits, with a fixture implementation reading recorded
//! responses from disk and a live implementation talking HTTP.

mod fetch;
mod fixture;
mod harvest;
mod live;
mod throttle;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use webharvest_core::model::{ConceptClass, Expansion};

pub use fetch::{fetch_image, ContentStore, Fetcher, Payload, UrlFetcher};
pub use fixture::{fixture_file, FixtureKeywords, FixtureSearch};
pub use harvest::{Harvest, Harvester, QueryFailure, SearchHit};
pub use live::{HttpKeywords, HttpSearch};
pub use throttle::{EngineGate, RetryPolicy};

pub const DEFAULT_KEYWORDS: usize = 20;
pub const DEFAULT_TOP_K: usize = 200;
pub const DEFAULT_CRAP_MAX: usize = 10_000;

#[derive(Debug, Error)]
pub enum AcquireError {
    #[error("{service} unreachable: {message}")]
    Unreachable { service: String, message: String },
    #[error("{service} is rate limiting requests")]
    RateLimited { service: String },
    #[error("{service} answered HTTP {status}")]
    Http { service: String, status: u16 },
    #[error("{service} sent an unreadable response: {message}")]
    BadResponse { service: String, message: String },
    #[error("keyword service returned no keywords for {0:?}")]
    EmptyExpansion(String),
    #[error("fixture file {} is missing", .0.display())]
    FixtureMissing(PathBuf),
    #[error("reading {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error("every one of the {queries} queries for class {class} failed")]
    AllQueriesFailed { class: String, queries: usize },
}

impl AcquireError {
    /// Transient failures worth another attempt after a backoff.
    pub fn is_retriable(&self) -> bool {
        match self {
            AcquireError::Unreachable { .. } | AcquireError::RateLimited { .. } => true,
            AcquireError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }

    /// Problems with the setup rather than with one request.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            AcquireError::FixtureMissing(_) | AcquireError::Config(_)
        )
    }
}

/// One search engine and how hard we may query it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub tag: String,
    pub top_k: usize,
    pub max_concurrent_requests: usize,
    pub min_request_interval: Duration,
}

impl EngineConfig {
    pub fn new(tag: impl Into<String>) -> Self {
        EngineConfig {
            tag: tag.into(),
            top_k: DEFAULT_TOP_K,
            max_concurrent_requests: 4,
            min_request_interval: Duration::ZERO,
        }
    }

    pub fn validate(&self) -> Result<(), AcquireError> {
        let bad = |m: &str| Err(AcquireError::Config(format!("engine {:?}: {m}", self.tag)));
        if self.tag.is_empty()
            || !self
                .tag
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return bad("tag must be non-empty ASCII letters, digits, '-' or '_'");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.max_concurrent_requests == 0 {
            return bad("max_concurrent_requests must be at least 1");
        }
        Ok(())
    }
}

/// One ranked hit from one engine for one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    pub result_rank: u32,
    pub engine: String,
    pub query: String,
}

/// Ranked keyword suggestions for a phrase.
pub trait KeywordService: Send + Sync {
    fn keywords(&self, phrase: &str, k: usize) -> Result<Vec<String>, AcquireError>;
}

/// Ranked image URLs for a query; entry `i` has rank `i + 1`.
pub trait SearchBackend: Send + Sync {
    fn search(&self, query: &str, engine: &EngineConfig) -> Result<Vec<String>, AcquireError>;
}

/// Asks the keyword service for up to `k` expansions of a class.
///
/// The class name itself and case-insensitive repeats are dropped before the
/// list is cut to `k`; ranks are 1-based positions in the cleaned list.
pub fn expand_concept(
    service: &dyn KeywordService,
    class: &ConceptClass,
    k: usize,
) -> Result<Vec<Expansion>, AcquireError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let raw = service.keywords(&class.name, k)?;
    if raw.is_empty() {
        return Err(AcquireError::EmptyExpansion(class.name.clone()));
    }
    let mut seen = std::collections::HashSet::new();
    seen.insert(class.name.to_lowercase());
    let keywords: Vec<String> = raw
        .iter()
        .map(|k| k.trim().to_lowercase())
        .filter(|k| !k.is_empty() && !k.chars().any(char::is_control))
        .filter(|k| seen.insert(k.clone()))
        .take(k)
        .collect();
    if keywords.is_empty() {
        return Err(AcquireError::EmptyExpansion(class.name.clone()));
    }
    Ok(keywords
        .into_iter()
        .enumerate()
        .map(|(i, keyword)| Expansion {
            class_id: class.class_id.clone(),
            keyword,
            rank: i as u32 + 1,
            dup_count: 0,
            score: None,
        })
        .collect())
}

/// Runs one query against one engine, keeping ranks `1..=top_k`.
///
/// A result's rank is its position in the engine's answer; malformed URLs are
/// logged and skipped without renumbering the rest.
pub fn search_images(
    backend: &dyn SearchBackend,
    query: &str,
    engine: &EngineConfig,
) -> Result<Vec<SearchResult>, AcquireError> {
    engine.validate()?;
    let urls = backend.search(query, engine)?;
    let mut out = Vec::with_capacity(urls.len().min(engine.top_k));
    for (i, raw) in urls.iter().take(engine.top_k).enumerate() {
        let rank = i as u32 + 1;
        match url::Url::parse(raw.trim()) {
            Ok(u) if matches!(u.scheme(), "http" | "https" | "file") => out.push(SearchResult {
                url: u.to_string(),
                result_rank: rank,
                engine: engine.tag.clone(),
                query: query.to_string(),
            }),
            _ => log::warn!(
                "{} {query:?} rank {rank}: skipping malformed url {raw:?}",
                engine.tag
            ),
        }
    }
    Ok(out)
}
