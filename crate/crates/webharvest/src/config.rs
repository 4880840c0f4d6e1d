//! Pipeline configuration file (TOML).
//!
//! ```toml
//! classes = "classes.tsv"       # class_id <TAB> name [<TAB> synset_id]
//! work_dir = "work"
//! mode = "fixture"              # or "live"
//! fixtures = "fixtures"
//! target_count = 600
//! seed = 42
//! ```
//!
//! Every other key has a default; see [`PipelineConfig`]. Relative paths are
//! resolved against the directory holding the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use webharvest_core::dedup::DEFAULT_THRESHOLD;
use webharvest_core::manifest::Strategy;
use webharvest_core::model::ConceptClass;
use webharvest_core::noise::DEFAULT_FRACTIONS;
use webharvest_core::score::DEFAULT_KEEP;

use crate::acquisition::{
    EngineConfig, RetryPolicy, DEFAULT_CRAP_MAX, DEFAULT_KEYWORDS, DEFAULT_TOP_K,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", .path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}:{line}: {message}", .path.display())]
    Classes {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Fixture,
    Live,
}

/// Where feature vectors come from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Embedding {
    /// Colour histogram plus gradient orientations, computed locally.
    #[default]
    Builtin,
    /// Precomputed vectors in a feature file, e.g. CNN activations.
    Imported(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineLimits {
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub min_request_interval_ms: u64,
}

impl Default for EngineLimits {
    fn default() -> Self {
        EngineLimits {
            max_concurrent_requests: default_concurrency(),
            min_request_interval_ms: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrapConfig {
    #[serde(default = "default_crap_engine")]
    pub engine: String,
    #[serde(default = "default_crap_max")]
    pub max_images: usize,
}

impl Default for CrapConfig {
    fn default() -> Self {
        CrapConfig {
            engine: default_crap_engine(),
            max_images: DEFAULT_CRAP_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryConfig {
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff")]
    pub initial_backoff_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            attempts: default_attempts(),
            initial_backoff_ms: default_backoff(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Manifest of images whose labels lie outside the dataset.
    #[serde(default)]
    pub external_pool: Option<PathBuf>,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            external_pool: None,
            fractions: default_fractions(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub classes: PathBuf,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_fixtures")]
    pub fixtures: PathBuf,
    /// Keywords requested per class.
    #[serde(default = "default_keywords")]
    pub keywords: usize,
    #[serde(default = "default_engines")]
    pub engines: Vec<String>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Per-engine overrides of [`PipelineConfig::limits`].
    #[serde(default)]
    pub engine_limits: BTreeMap<String, EngineLimits>,
    #[serde(default)]
    pub limits: EngineLimits,
    #[serde(default = "default_threshold")]
    pub dedup_threshold: u32,
    #[serde(default)]
    pub embedding: Embedding,
    /// Expansions kept per class by scoring.
    #[serde(default = "default_keep")]
    pub keep: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub target_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Largest tolerated share of failed queries or downloads.
    #[serde(default = "default_tolerance")]
    pub max_failure_fraction: f64,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub crap: CrapConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
}

fn default_work_dir() -> PathBuf {
    "work".into()
}
fn default_fixtures() -> PathBuf {
    "fixtures".into()
}
fn default_keywords() -> usize {
    DEFAULT_KEYWORDS
}
fn default_engines() -> Vec<String> {
    vec!["google".into(), "yahoo".into(), "bing".into()]
}
fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_concurrency() -> usize {
    4
}
fn default_threshold() -> u32 {
    DEFAULT_THRESHOLD
}
fn default_keep() -> usize {
    DEFAULT_KEEP
}
fn default_strategy() -> Strategy {
    Strategy::Filtered
}
fn default_workers() -> usize {
    8
}
fn default_tolerance() -> f64 {
    0.5
}
fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> u64 {
    1000
}
fn default_crap_engine() -> String {
    "picsearch".into()
}
fn default_crap_max() -> usize {
    DEFAULT_CRAP_MAX
}
fn default_fractions() -> Vec<f64> {
    DEFAULT_FRACTIONS.to_vec()
}

impl PipelineConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.engines.is_empty() {
            return invalid("at least one engine is required".into());
        }
        for e in self.engine_configs().iter().chain([&self.crap_engine()]) {
            e.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for (i, e) in self.engines.iter().enumerate() {
            if self.engines[..i].contains(e) {
                return invalid(format!("engine {e:?} listed twice"));
            }
        }
        if let Some(tag) = self
            .engine_limits
            .keys()
            .find(|t| !self.engines.contains(t) && **t != self.crap.engine)
        {
            return invalid(format!(
                "engine_limits.{tag} names an engine that is not configured"
            ));
        }
        if self.dedup_threshold > 64 {
            return invalid(format!(
                "dedup_threshold {} exceeds 64 bits",
                self.dedup_threshold
            ));
        }
        if self.keep == 0 {
            return invalid("keep must be at least 1".into());
        }
        if self.target_count == 0 {
            return invalid("target_count must be at least 1".into());
        }
        if self.workers == 0 {
            return invalid("workers must be at least 1".into());
        }
        if self.retry.attempts == 0 {
            return invalid("retry.attempts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return invalid(format!(
                "max_failure_fraction {} outside [0, 1]",
                self.max_failure_fraction
            ));
        }
        if let Some(f) = self
            .noise
            .fractions
            .iter()
            .find(|f| !(0.0..=1.0).contains(*f))
        {
            return invalid(format!("noise fraction {f} outside [0, 1]"));
        }
        Ok(())
    }

    fn engine_config(&self, tag: &str, top_k: usize) -> EngineConfig {
        let limits = self.engine_limits.get(tag).copied().unwrap_or(self.limits);
        EngineConfig {
            tag: tag.into(),
            top_k,
            max_concurrent_requests: limits.max_concurrent_requests,
            min_request_interval: Duration::from_millis(limits.min_request_interval_ms),
        }
    }

    pub fn engine_configs(&self) -> Vec<EngineConfig> {
        self.engines
            .iter()
            .map(|t| self.engine_config(t, self.top_k))
            .collect()
    }

    pub fn crap_engine(&self) -> EngineConfig {
        self.engine_config(&self.crap.engine, self.crap.max_images.max(1))
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry.attempts,
            initial_backoff: Duration::from_millis(self.retry.initial_backoff_ms),
        }
    }

    /// First 16 hex digits of the SHA-256 of the config's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Parses the class list: `class_id <TAB> name [<TAB> synset_id]`, with `#`
/// comments and blank lines ignored.
pub fn parse_classes(
    text: &str,
    path: &Path,
    target_count: usize,
) -> Result<Vec<ConceptClass>, ConfigError> {
    let mut out: Vec<ConceptClass> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| ConfigError::Classes {
            path: path.into(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(err(format!(
                "expected 2 or 3 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let synset = cols.get(2).filter(|s| !s.is_empty()).map(|s| s.to_string());
        let class = ConceptClass::new(cols[0], cols[1], synset, target_count)
            .map_err(|e| err(e.to_string()))?;
        if out.iter().any(|c| c.class_id == class.class_id) {
            return Err(err(format!("class id {} appears twice", class.class_id)));
        }
        if out.iter().any(|c| c.name == class.name) {
            return Err(err(format!("class name {:?} appears twice", class.name)));
        }
        out.push(class);
    }
    if out.is_empty() {
        return Err(ConfigError::Classes {
            path: path.into(),
            line: 0,
            message: "no classes listed".into(),
        });
    }
    Ok(out)
}

/// A validated configuration with its paths resolved.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub hash: String,
    pub classes: Vec<ConceptClass>,
    pub work_dir: PathBuf,
    pub fixtures: PathBuf,
    base: PathBuf,
}

/// Command-line overrides applied before validation and hashing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Forces fixture mode with this directory.
    pub fixtures: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        let mut config = PipelineConfig::from_toml(&text, path)?;
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(dir) = &overrides.fixtures {
            config.mode = Mode::Fixture;
            config.fixtures = std::path::absolute(dir).unwrap_or_else(|_| dir.clone());
        }
        config.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let classes_path = resolve(&config.classes);
        let classes_text = fs::read_to_string(&classes_path).map_err(|source| ConfigError::Io {
            path: classes_path.clone(),
            source,
        })?;
        let classes = parse_classes(&classes_text, &classes_path, config.target_count)?;
        Ok(LoadedConfig {
            hash: config.hash(),
            work_dir: resolve(&config.work_dir),
            fixtures: resolve(&config.fixtures),
            classes,
            config,
            base,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}
