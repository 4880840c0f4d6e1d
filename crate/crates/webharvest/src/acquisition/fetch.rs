use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use sha2::{Digest, Sha256};
use webharvest_core::model::{ConceptClass, ContentDigest, FailureReason, ImageRecord, Origin};

use super::{RetryPolicy, SearchResult};
use crate::imaging::{self, ImageError};

/// Downloaded bytes plus the declared media type, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub bytes: Vec<u8>,
    pub content_type: Option<String>,
}

pub trait Fetcher: Send + Sync {
    fn get(&self, url: &str) -> Result<Payload, FailureReason>;
}

/// Fetches `http(s)://` over the network and `file://` from local disk.
pub struct UrlFetcher {
    agent: ureq::Agent,
}

impl UrlFetcher {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .user_agent(concat!("webharvest/", env!("CARGO_PKG_VERSION")))
            .build();
        UrlFetcher {
            agent: config.into(),
        }
    }
}

impl Default for UrlFetcher {
    fn default() -> Self {
        UrlFetcher::new(Duration::from_secs(30))
    }
}

pub(crate) fn http_failure(e: &ureq::Error) -> FailureReason {
    match e {
        ureq::Error::Timeout(_) => FailureReason::Timeout,
        ureq::Error::StatusCode(code) => FailureReason::HttpStatus(*code),
        _ => FailureReason::Network,
    }
}

impl Fetcher for UrlFetcher {
    fn get(&self, url: &str) -> Result<Payload, FailureReason> {
        let parsed = url::Url::parse(url).map_err(|_| FailureReason::NotFound)?;
        if parsed.scheme() == "file" {
            let path = parsed.to_file_path().map_err(|_| FailureReason::NotFound)?;
            return match fs::read(&path) {
                Ok(bytes) => Ok(Payload {
                    bytes,
                    content_type: None,
                }),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(FailureReason::NotFound),
                Err(_) => Err(FailureReason::Io),
            };
        }
        let mut resp = self.agent.get(url).call().map_err(|e| http_failure(&e))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            404 | 410 => return Err(FailureReason::NotFound),
            _ => return Err(FailureReason::HttpStatus(status)),
        }
        let content_type = resp
            .headers()
            .get("content-type")
            .and_then(|v| v.to_str().ok())
            .map(|s| s.trim().to_ascii_lowercase());
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| http_failure(&e))?;
        Ok(Payload {
            bytes,
            content_type,
        })
    }
}

fn transient(reason: &FailureReason) -> bool {
    match reason {
        FailureReason::Timeout | FailureReason::Network => true,
        FailureReason::HttpStatus(code) => *code == 429 || *code >= 500,
        _ => false,
    }
}

/// Flat content-addressed directory: `<base>/store/<2 hex>/<64 hex>.<ext>`.
///
/// Paths handed out are relative to `base`, so a work directory can move.
#[derive(Debug, Clone)]
pub struct ContentStore {
    base: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ContentStore {
    pub fn new(base: impl Into<PathBuf>) -> Self {
        ContentStore { base: base.into() }
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base.join(relative)
    }

    /// Stores `bytes` under their digest. Concurrent writers of the same
    /// content race harmlessly: each writes a private temp file and renames.
    pub fn put(&self, digest: &ContentDigest, ext: &str, bytes: &[u8]) -> std::io::Result<String> {
        let hex = digest.to_hex();
        let relative = format!("store/{}/{hex}.{ext}", &hex[..2]);
        let target = self.base.join(&relative);
        if target.is_file() {
            return Ok(relative);
        }
        let dir = target.parent().expect("store path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".{hex}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let written = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        })();
        if written.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        written.map(|_| relative)
    }

    pub fn base(&self) -> &Path {
        &self.base
    }
}

/// Downloads, validates and stores one search result.
///
/// Never fails as a whole: problems end up as the record's failure reason.
pub fn fetch_image(
    result: &SearchResult,
    origin: Origin,
    class: &ConceptClass,
    fetcher: &dyn Fetcher,
    store: &ContentStore,
    retry: &RetryPolicy,
) -> ImageRecord {
    let mut record = ImageRecord::pending(
        class,
        origin,
        &result.engine,
        result.result_rank,
        &result.url,
    );
    match retry
        .run(|| fetcher.get(&result.url), transient)
        .and_then(|p| accept(&p, store))
    {
        Ok((digest, hash, path)) => record.mark_fetched(digest, hash, path),
        Err(reason) => {
            log::debug!("{}: {reason}", record.key());
            record.mark_failed(reason);
        }
    }
    record
}

fn accept(
    payload: &Payload,
    store: &ContentStore,
) -> Result<
    (
        ContentDigest,
        webharvest_core::phash::PerceptualHash,
        String,
    ),
    FailureReason,
> {
    if let Some(ct) = &payload.content_type {
        if !(ct.starts_with("image/") || ct.starts_with("application/octet-stream")) {
            return Err(FailureReason::NonImage);
        }
    }
    let (rgb, format) = imaging::decode(&payload.bytes).map_err(|e| match e {
        ImageError::NonImage => FailureReason::NonImage,
        _ => FailureReason::DecodeError,
    })?;
    let digest = ContentDigest(Sha256::digest(&payload.bytes).into());
    let path = store
        .put(&digest, imaging::extension(format), &payload.bytes)
        .map_err(|_| FailureReason::Io)?;
    Ok((digest, rgb.phash(), path))
}
