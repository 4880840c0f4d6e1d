//! The pipeline, one resumable stage at a time.
//!
//! | stage    | reads                                   | writes                         |
//! |----------|-----------------------------------------|--------------------------------|
//! | expand   | keyword service                         | `keywords.json`                |
//! | search   | `keywords.json`, search engines         | `search.jsonl`                 |
//! | fetch    | `search.jsonl`                          | `records.jsonl`, `store/`      |
//! | dedup    | `records.jsonl`                         | `dedup.json`                   |
//! | embed    | `records.jsonl`, `dedup.json`           | `features.bin`, `stats.json`   |
//! | score    | `stats.json`                            | `scores.csv`, `selection.json` |
//! | assemble | records, dedup, selection (filtered)    | `manifest-<strategy>.jsonl`    |
//! | noise    | a manifest                              | `noise/<kind>-<permille>.*`    |
//! | audit    | original, noisy manifests and logs      | `audit.json`                   |
//! | project  | `features.bin`, dedup or manifests      | `pca-<class>.csv`              |
//!
//! All paths are inside the configured work directory. Every output records
//! the hash of the configuration that produced it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use webharvest_core::assemble::{assemble, AssembleError, ClassPool};
use webharvest_core::dedup::{
    dedup_cross_expansion, dedup_per_query, group_by_origin, DedupReport,
};
use webharvest_core::manifest::{DatasetManifest, Strategy};
use webharvest_core::model::{
    ConceptClass, Expansion, FeatureVector, ImageId, ImageRecord, Origin, RecordKey,
};
use webharvest_core::noise::{
    audit_noise, inject_noise, noise_grid, NoiseAuditReport, NoiseKind, NoiseSpec,
};
use webharvest_core::pca::pca_project;
use webharvest_core::score::{score_all, ScoredExpansion};
use webharvest_core::stats::{centroid, ExpansionStats};

use crate::acquisition::{
    expand_concept, AcquireError, ContentStore, FixtureKeywords, FixtureSearch, Harvester,
    HttpKeywords, HttpSearch, KeywordService, QueryFailure, SearchBackend, SearchHit, UrlFetcher,
};
use crate::config::{ConfigError, Embedding, LoadedConfig, Mode, Overrides};
use crate::features::{read_features, write_features, FeatureMap};
use crate::imaging;
use crate::io::{
    read_json, read_jsonl, read_manifest, read_replacement_log, write_atomic, write_json,
    write_jsonl, write_manifest, write_replacement_log, IoError,
};

pub const KEYWORDS: &str = "keywords.json";
pub const SEARCH: &str = "search.jsonl";
pub const RECORDS: &str = "records.jsonl";
pub const DEDUP: &str = "dedup.json";
pub const FEATURES: &str = "features.bin";
pub const FEATURES_META: &str = "features.json";
pub const STATS: &str = "stats.json";
pub const SCORES: &str = "scores.csv";
pub const SELECTION: &str = "selection.json";
pub const NOISE_DIR: &str = "noise";
pub const AUDIT: &str = "audit.json";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("too many failures: {0}")]
    Partial(String),
    #[error("{0}")]
    Failed(String),
}

impl StageError {
    /// 2 config, 3 missing inputs, 4 failures above tolerance, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            StageError::Config(_) => 2,
            StageError::Precondition(_) => 3,
            StageError::Partial(_) => 4,
            StageError::Failed(_) => 1,
        }
    }
}

impl From<ConfigError> for StageError {
    fn from(e: ConfigError) -> Self {
        StageError::Config(e.to_string())
    }
}

impl From<IoError> for StageError {
    fn from(e: IoError) -> Self {
        StageError::Failed(e.to_string())
    }
}

fn acquire_error(e: AcquireError) -> StageError {
    if e.is_config() {
        StageError::Config(e.to_string())
    } else {
        StageError::Failed(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordsFile {
    pub config_hash: String,
    pub classes: Vec<ClassKeywords>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassKeywords {
    pub class_id: String,
    pub name: String,
    pub expansions: Vec<Expansion>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchHeader {
    pub config_hash: String,
    pub queries: usize,
    pub failures: Vec<QueryFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordsHeader {
    pub config_hash: String,
    pub fetched: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DedupFile {
    pub config_hash: String,
    pub threshold: u32,
    pub classes: Vec<ClassDedup>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDedup {
    pub class_id: String,
    pub per_query: Vec<QueryDedup>,
    /// Base and expansions after per-query dedup, against each other.
    pub cross: DedupReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryDedup {
    pub origin: Origin,
    pub report: DedupReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturesMeta {
    pub config_hash: String,
    pub embedding: String,
    pub dim: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsFile {
    pub config_hash: String,
    pub dim: usize,
    pub classes: Vec<ClassStats>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: String,
    pub base_images: usize,
    pub expansions: Vec<ExpansionStats>,
    /// Keywords left without images after dedup, so without statistics.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionFile {
    pub config_hash: String,
    pub keep: usize,
    pub classes: Vec<ClassSelection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSelection {
    pub class_id: String,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditFile {
    pub config_hash: String,
    pub audits: Vec<AuditEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditEntry {
    pub manifest: String,
    #[serde(flatten)]
    pub outcome: AuditOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditOutcome {
    Report(NoiseAuditReport),
    Error(String),
}

/// File name of one noise cell, e.g. `internal-050`.
pub fn noise_cell_name(kind: NoiseKind, fraction: f64) -> String {
    format!("{kind}-{:03}", (fraction * 1000.0).round() as u64)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub struct Pipeline {
    cfg: LoadedConfig,
}

impl Pipeline {
    pub fn load(config: &Path, overrides: &Overrides) -> Result<Self, StageError> {
        Ok(Pipeline {
            cfg: LoadedConfig::load(config, overrides)?,
        })
    }

    pub fn config(&self) -> &LoadedConfig {
        &self.cfg
    }

    pub fn work(&self, name: &str) -> PathBuf {
        self.cfg.work_dir.join(name)
    }

    fn require(&self, name: &str, producer: &str) -> Result<PathBuf, StageError> {
        let path = self.work(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(StageError::Precondition(format!(
                "{} not found; run `{producer}` first",
                path.display()
            )))
        }
    }

    fn check_hash(&self, what: &Path, hash: &str) {
        if hash != self.cfg.hash {
            log::warn!(
                "{} was produced with config {hash}, current config is {}",
                what.display(),
                self.cfg.hash
            );
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool, StageError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.config.workers)
            .build()
            .map_err(|e| StageError::Failed(format!("worker pool: {e}")))
    }

    fn class(&self, id: &str) -> Result<&ConceptClass, StageError> {
        self.cfg
            .classes
            .iter()
            .find(|c| c.class_id == id)
            .ok_or_else(|| StageError::Precondition(format!("class {id} is not in the class list")))
    }

    fn tolerate(&self, what: &str, failed: usize, total: usize) -> Result<(), StageError> {
        let limit = self.cfg.config.max_failure_fraction;
        if total > 0 && failed as f64 > limit * total as f64 {
            return Err(StageError::Partial(format!(
                "{failed} of {total} {what} failed (tolerance {:.0}%)",
                limit * 100.0
            )));
        }
        Ok(())
    }

    fn keyword_service(&self) -> Result<Box<dyn KeywordService>, StageError> {
        Ok(match self.cfg.config.mode {
            Mode::Fixture => Box::new(FixtureKeywords::new(&self.cfg.fixtures)),
            Mode::Live => Box::new(HttpKeywords::from_env().map_err(acquire_error)?),
        })
    }

    fn search_backend(&self, crap: bool) -> Result<Box<dyn SearchBackend>, StageError> {
        Ok(match self.cfg.config.mode {
            Mode::Fixture => Box::new(FixtureSearch::new(&self.cfg.fixtures)),
            Mode::Live => {
                let engines = if crap {
                    vec![self.cfg.config.crap_engine()]
                } else {
                    self.cfg.config.engine_configs()
                };
                Box::new(HttpSearch::from_env(&engines).map_err(acquire_error)?)
            }
        })
    }

    // ---- expand ----

    pub fn expand(&self) -> Result<(), StageError> {
        let service = self.keyword_service()?;
        let retry = self.cfg.config.retry_policy();
        let k = self.cfg.config.keywords;
        let mut classes = Vec::new();
        for class in &self.cfg.classes {
            let expansions = match retry.run(
                || expand_concept(&*service, class, k),
                AcquireError::is_retriable,
            ) {
                Ok(list) => list,
                Err(AcquireError::EmptyExpansion(_)) => {
                    log::warn!(
                        "{}: no keywords, continuing with the base query only",
                        class.class_id
                    );
                    Vec::new()
                }
                Err(e) => return Err(acquire_error(e)),
            };
            log::info!(
                "expand {} ({}): {} keywords",
                class.class_id,
                class.name,
                expansions.len()
            );
            classes.push(ClassKeywords {
                class_id: class.class_id.clone(),
                name: class.name.clone(),
                expansions,
            });
        }
        write_json(
            &self.work(KEYWORDS),
            &KeywordsFile {
                config_hash: self.cfg.hash.clone(),
                classes,
            },
        )?;
        Ok(())
    }

    fn keywords(&self) -> Result<BTreeMap<String, Vec<Expansion>>, StageError> {
        let path = self.require(KEYWORDS, "expand")?;
        let file: KeywordsFile = read_json(&path)?;
        self.check_hash(&path, &file.config_hash);
        Ok(file
            .classes
            .into_iter()
            .map(|c| (c.class_id, c.expansions))
            .collect())
    }

    /// Keyword order per class, or `None` when `expand` has not been run.
    fn keyword_order(&self) -> Result<Option<BTreeMap<String, Vec<String>>>, StageError> {
        if !self.work(KEYWORDS).is_file() {
            return Ok(None);
        }
        Ok(Some(
            self.keywords()?
                .into_iter()
                .map(|(id, mut exps)| {
                    exps.sort_by_key(|e| e.rank);
                    (id, exps.into_iter().map(|e| e.keyword).collect())
                })
                .collect(),
        ))
    }

    // ---- search ----

    /// Queries the engines for every class. The crap strategy uses its single
    /// engine with the base query only and needs no keywords.
    pub fn search(&self) -> Result<(), StageError> {
        let config = &self.cfg.config;
        let crap = config.strategy == Strategy::Crap;
        let keywords = if crap {
            BTreeMap::new()
        } else {
            self.keywords()?
        };
        let backend = self.search_backend(crap)?;
        let fetcher = UrlFetcher::default();
        let store = ContentStore::new(&self.cfg.work_dir);
        let harvester = Harvester::new(
            &*backend,
            &fetcher,
            &store,
            config.engine_configs(),
            config.workers,
            config.retry_policy(),
        )
        .map_err(acquire_error)?;

        let mut hits: Vec<SearchHit> = Vec::new();
        let mut failures = Vec::new();
        let mut queries = 0;
        for class in &self.cfg.classes {
            let expansions = keywords
                .get(&class.class_id)
                .map(Vec::as_slice)
                .unwrap_or_default();
            let (n, outcome) = if crap {
                (
                    1,
                    harvester.search_crap(class, &config.crap_engine(), config.crap.max_images),
                )
            } else {
                (
                    (1 + expansions.len()) * config.engines.len(),
                    harvester.search_class(class, expansions),
                )
            };
            queries += n;
            match outcome {
                Ok((h, f)) => {
                    log::info!(
                        "search {}: {} results from {n} queries, {} failed",
                        class.class_id,
                        h.len(),
                        f.len()
                    );
                    hits.extend(h);
                    failures.extend(f);
                }
                Err(e @ AcquireError::AllQueriesFailed { .. }) => {
                    log::error!("search {}: {e}", class.class_id);
                    failures.push(QueryFailure {
                        class_id: class.class_id.clone(),
                        query: "*".into(),
                        engine: "*".into(),
                        error: e.to_string(),
                    });
                    failures.extend((1..n).map(|_| QueryFailure {
                        class_id: class.class_id.clone(),
                        query: "*".into(),
                        engine: "*".into(),
                        error: "skipped".into(),
                    }));
                }
                Err(e) => return Err(acquire_error(e)),
            }
        }
        let failed = failures.len();
        write_jsonl(
            &self.work(SEARCH),
            &SearchHeader {
                config_hash: self.cfg.hash.clone(),
                queries,
                failures,
            },
            &hits,
        )?;
        self.tolerate("queries", failed, queries)
    }

    // ---- fetch ----

    pub fn fetch(&self) -> Result<(), StageError> {
        let config = &self.cfg.config;
        let path = self.require(SEARCH, "search")?;
        let (header, hits): (SearchHeader, Vec<SearchHit>) = read_jsonl(&path)?;
        self.check_hash(&path, &header.config_hash);

        let mut engines = config.engine_configs();
        if !config.engines.contains(&config.crap.engine) {
            engines.push(config.crap_engine());
        }
        let backend = FixtureSearch::new(&self.cfg.fixtures);
        let fetcher = UrlFetcher::default();
        let store = ContentStore::new(&self.cfg.work_dir);
        let harvester = Harvester::new(
            &backend,
            &fetcher,
            &store,
            engines,
            config.workers,
            config.retry_policy(),
        )
        .map_err(acquire_error)?;

        let mut by_class: BTreeMap<&str, Vec<SearchHit>> = BTreeMap::new();
        for hit in hits {
            let class = self.class(&hit.class_id)?;
            by_class
                .entry(class.class_id.as_str())
                .or_default()
                .push(hit);
        }
        let mut records = Vec::new();
        for class in &self.cfg.classes {
            let Some(class_hits) = by_class.get(class.class_id.as_str()) else {
                continue;
            };
            let fetched = harvester.fetch(class, class_hits);
            log::info!(
                "fetch {}: {} of {} downloaded",
                class.class_id,
                fetched.iter().filter(|r| r.is_fetched()).count(),
                fetched.len()
            );
            records.extend(fetched);
        }
        let fetched = records.iter().filter(|r| r.is_fetched()).count();
        let failed = records.len() - fetched;
        write_jsonl(
            &self.work(RECORDS),
            &RecordsHeader {
                config_hash: self.cfg.hash.clone(),
                fetched,
                failed,
            },
            &records,
        )?;
        self.tolerate("downloads", failed, records.len())
    }

    fn records(&self) -> Result<Vec<ImageRecord>, StageError> {
        let path = self.require(RECORDS, "fetch")?;
        let (header, records): (RecordsHeader, Vec<ImageRecord>) = read_jsonl(&path)?;
        self.check_hash(&path, &header.config_hash);
        Ok(records)
    }

    // ---- dedup ----

    pub fn dedup(&self, threshold: Option<u32>) -> Result<(), StageError> {
        let threshold = threshold.unwrap_or(self.cfg.config.dedup_threshold);
        if threshold > 64 {
            return Err(StageError::Config(format!(
                "threshold {threshold} exceeds 64 bits"
            )));
        }
        let records = self.records()?;
        let order = self.keyword_order()?.unwrap_or_default();
        let by_class = group_by_class(&records);
        let classes: Vec<ClassDedup> = self.pool()?.install(|| {
            self.cfg
                .classes
                .par_iter()
                .map(|class| {
                    let fetched: Vec<ImageRecord> = by_class
                        .get(class.class_id.as_str())
                        .map(|rs| {
                            rs.iter()
                                .filter(|r| r.is_fetched())
                                .map(|r| (*r).clone())
                                .collect()
                        })
                        .unwrap_or_default();
                    dedup_class(class, &fetched, order.get(&class.class_id), threshold)
                })
                .collect::<Result<Vec<_>, StageError>>()
        })?;
        for c in &classes {
            let removed: usize = c.per_query.iter().map(|q| q.report.removed.len()).sum();
            log::info!(
                "dedup {}: {removed} per-query and {} cross-expansion duplicates removed, {} kept",
                c.class_id,
                c.cross.removed.len(),
                c.cross.kept.len()
            );
        }
        write_json(
            &self.work(DEDUP),
            &DedupFile {
                config_hash: self.cfg.hash.clone(),
                threshold,
                classes,
            },
        )?;
        Ok(())
    }

    fn dedup_file(&self) -> Result<DedupFile, StageError> {
        let path = self.require(DEDUP, "dedup")?;
        let file: DedupFile = read_json(&path)?;
        self.check_hash(&path, &file.config_hash);
        Ok(file)
    }

    /// Fetched records surviving dedup, per class, in record order.
    fn kept(&self) -> Result<(BTreeMap<String, Vec<ImageRecord>>, DedupFile), StageError> {
        let records = self.records()?;
        let dedup = self.dedup_file()?;
        let keep: BTreeSet<&RecordKey> = dedup
            .classes
            .iter()
            .flat_map(|c| c.cross.kept.iter())
            .collect();
        let mut out: BTreeMap<String, Vec<ImageRecord>> = BTreeMap::new();
        for r in records {
            if r.is_fetched() && keep.contains(&r.key()) {
                out.entry(r.class_id.clone()).or_default().push(r);
            }
        }
        Ok((out, dedup))
    }

    // ---- embed ----

    pub fn embed(&self) -> Result<(), StageError> {
        let (kept, dedup) = self.kept()?;
        let order = self.keyword_order()?.unwrap_or_default();
        let paths: BTreeMap<&ImageId, &str> = kept
            .values()
            .flatten()
            .map(|r| {
                (
                    r.image_id.as_ref().unwrap(),
                    r.local_path.as_deref().unwrap(),
                )
            })
            .collect();

        let (features, provider) = match &self.cfg.config.embedding {
            Embedding::Builtin => {
                let store = ContentStore::new(&self.cfg.work_dir);
                let list: Vec<(&ImageId, &str)> = paths.iter().map(|(k, v)| (*k, *v)).collect();
                let vectors = self.pool()?.install(|| {
                    list.par_iter()
                        .map(|(id, path)| {
                            let rgb = imaging::decode_file(&store.resolve(path))
                                .map_err(|e| StageError::Failed(format!("embedding {id}: {e}")))?;
                            Ok(FeatureVector {
                                image_id: (*id).clone(),
                                values: rgb.embed(),
                            })
                        })
                        .collect::<Result<Vec<_>, StageError>>()
                })?;
                let map: FeatureMap = vectors
                    .into_iter()
                    .map(|v| (v.image_id.clone(), v))
                    .collect();
                (map, "builtin".to_string())
            }
            Embedding::Imported(file) => {
                let path = self.cfg.resolve(file);
                if !path.is_file() {
                    return Err(StageError::Precondition(format!(
                        "feature file {} not found",
                        path.display()
                    )));
                }
                let all = read_features(&path).map_err(|e| StageError::Failed(e.to_string()))?;
                let missing: Vec<&ImageId> = paths
                    .keys()
                    .filter(|id| !all.contains_key(*id))
                    .copied()
                    .collect();
                if !missing.is_empty() {
                    return Err(StageError::Precondition(format!(
                        "{} has no vectors for {} images (first: {})",
                        path.display(),
                        missing.len(),
                        missing[0]
                    )));
                }
                let map: FeatureMap = all
                    .into_iter()
                    .filter(|(id, _)| paths.contains_key(id))
                    .collect();
                (map, format!("imported:{}", file.display()))
            }
        };
        let dim = features.values().next().map_or(0, FeatureVector::dim);
        if let Some(v) = features.values().find(|v| v.dim() != dim) {
            return Err(StageError::Failed(format!(
                "vector {} has dim {}, expected {dim}",
                v.image_id,
                v.dim()
            )));
        }
        write_features(&self.work(FEATURES), features.values())
            .map_err(|e| StageError::Failed(e.to_string()))?;
        write_json(
            &self.work(FEATURES_META),
            &FeaturesMeta {
                config_hash: self.cfg.hash.clone(),
                embedding: provider,
                dim,
                count: features.len(),
            },
        )?;

        let dup_counts: BTreeMap<&str, &DedupReport> = dedup
            .classes
            .iter()
            .map(|c| (c.class_id.as_str(), &c.cross))
            .collect();
        let mut classes = Vec::new();
        for class in &self.cfg.classes {
            let records = kept
                .get(&class.class_id)
                .map(Vec::as_slice)
                .unwrap_or_default();
            let vector = |r: &ImageRecord| features[r.image_id.as_ref().unwrap()].values.as_slice();
            let base: Vec<&[f64]> = records
                .iter()
                .filter(|r| r.origin == Origin::Base)
                .map(vector)
                .collect();
            let mut stats = ClassStats {
                class_id: class.class_id.clone(),
                base_images: base.len(),
                expansions: Vec::new(),
                empty: Vec::new(),
            };
            let keywords = expansion_keywords(records, order.get(&class.class_id));
            if base.is_empty() {
                log::warn!(
                    "{}: no base images survived, expansions cannot be scored",
                    class.class_id
                );
                stats.empty = keywords;
                classes.push(stats);
                continue;
            }
            let class_centroid = centroid(&base).map_err(|e| StageError::Failed(e.to_string()))?;
            for keyword in keywords {
                let vecs: Vec<&[f64]> = records
                    .iter()
                    .filter(|r| r.origin.keyword() == Some(keyword.as_str()))
                    .map(vector)
                    .collect();
                if vecs.is_empty() {
                    stats.empty.push(keyword);
                    continue;
                }
                let dup = dup_counts
                    .get(class.class_id.as_str())
                    .and_then(|r| r.dup_counts.get(&keyword))
                    .copied()
                    .unwrap_or(0);
                let s =
                    ExpansionStats::compute(&class.class_id, &keyword, &class_centroid, &vecs, dup)
                        .map_err(|e| StageError::Failed(e.to_string()))?;
                stats.expansions.push(s);
            }
            log::info!(
                "embed {}: {} base images, {} expansions with statistics",
                class.class_id,
                base.len(),
                stats.expansions.len()
            );
            classes.push(stats);
        }
        write_json(
            &self.work(STATS),
            &StatsFile {
                config_hash: self.cfg.hash.clone(),
                dim,
                classes,
            },
        )?;
        Ok(())
    }

    // ---- score ----

    pub fn score(&self, stats: Option<&Path>, keep: Option<usize>) -> Result<(), StageError> {
        let keep = keep.unwrap_or(self.cfg.config.keep);
        if keep == 0 {
            return Err(StageError::Config("keep must be at least 1".into()));
        }
        let path = match stats {
            Some(p) if p.is_file() => p.to_path_buf(),
            Some(p) => {
                return Err(StageError::Precondition(format!(
                    "{} not found",
                    p.display()
                )))
            }
            None => self.require(STATS, "embed")?,
        };
        let file: StatsFile = read_json(&path)?;
        self.check_hash(&path, &file.config_hash);

        let mut csv = format!(
            "# config_hash: {}\nclass,keyword,d,s,dup,dup_max,score,selected\n",
            self.cfg.hash
        );
        let mut classes = Vec::new();
        for class in &file.classes {
            if class.expansions.is_empty() {
                log::warn!("score {}: no expansions to score", class.class_id);
                classes.push(ClassSelection {
                    class_id: class.class_id.clone(),
                    selected: Vec::new(),
                });
                continue;
            }
            let scored =
                score_all(&class.expansions).map_err(|e| StageError::Failed(e.to_string()))?;
            if scored.len() < keep {
                log::warn!(
                    "score {}: only {} expansions, wanted {keep}",
                    class.class_id,
                    scored.len()
                );
            }
            for (i, s) in scored.iter().enumerate() {
                write_score_row(&mut csv, s, i < keep);
            }
            let selected: Vec<String> = scored
                .iter()
                .take(keep)
                .map(|s| s.stats.keyword.clone())
                .collect();
            log::info!("score {}: selected {}", class.class_id, selected.join(", "));
            classes.push(ClassSelection {
                class_id: class.class_id.clone(),
                selected,
            });
        }
        write_atomic(&self.work(SCORES), |out| out.write_all(csv.as_bytes()))?;
        write_json(
            &self.work(SELECTION),
            &SelectionFile {
                config_hash: self.cfg.hash.clone(),
                keep,
                classes,
            },
        )?;
        Ok(())
    }

    // ---- assemble ----

    pub fn default_manifest_path(&self, strategy: Strategy) -> PathBuf {
        self.work(&format!("manifest-{strategy}.jsonl"))
    }

    pub fn assemble(
        &self,
        strategy: Option<Strategy>,
        target: Option<usize>,
        out: Option<&Path>,
    ) -> Result<PathBuf, StageError> {
        let strategy = strategy.unwrap_or(self.cfg.config.strategy);
        let target = target.unwrap_or(self.cfg.config.target_count);
        if target == 0 {
            return Err(StageError::Config("target must be at least 1".into()));
        }
        let selection: Option<BTreeMap<String, Vec<String>>> = if strategy == Strategy::Filtered {
            let path = self.require(SELECTION, "score")?;
            let file: SelectionFile = read_json(&path)?;
            self.check_hash(&path, &file.config_hash);
            Some(
                file.classes
                    .into_iter()
                    .map(|c| (c.class_id, c.selected))
                    .collect(),
            )
        } else {
            None
        };
        let order = if strategy == Strategy::Crap {
            self.keyword_order()?.unwrap_or_default()
        } else {
            self.require(KEYWORDS, "expand")?;
            self.keyword_order()?.unwrap_or_default()
        };
        let (mut kept, _) = self.kept()?;

        let pools: Vec<ClassPool> = self
            .cfg
            .classes
            .iter()
            .map(|class| {
                let mut class = class.clone();
                class.target_count = target;
                ClassPool {
                    records: kept.remove(&class.class_id).unwrap_or_default(),
                    expansion_order: order.get(&class.class_id).cloned().unwrap_or_default(),
                    selected: selection
                        .as_ref()
                        .and_then(|s| s.get(&class.class_id).cloned()),
                    class,
                }
            })
            .collect();
        let mut manifest =
            assemble(strategy, &pools, target, self.cfg.config.seed).map_err(|e| match e {
                AssembleError::MissingScores(_) => {
                    StageError::Precondition(format!("{e}; run `score` first"))
                }
                other => StageError::Failed(other.to_string()),
            })?;
        manifest.config_hash = Some(self.cfg.hash.clone());
        let path = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.default_manifest_path(strategy));
        write_manifest(&manifest, &path)?;
        log::info!(
            "assemble {strategy}: {} images in {} classes -> {}",
            manifest.entries.len(),
            pools.len(),
            path.display()
        );
        Ok(path)
    }

    // ---- noise ----

    fn input_manifest(
        &self,
        path: Option<&Path>,
    ) -> Result<(PathBuf, DatasetManifest), StageError> {
        let path = path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.default_manifest_path(self.cfg.config.strategy));
        if !path.is_file() {
            return Err(StageError::Precondition(format!(
                "manifest {} not found; run `assemble` first",
                path.display()
            )));
        }
        let m = read_manifest(&path)?;
        Ok((path, m))
    }

    fn external_pool(&self, path: Option<&Path>) -> Result<Option<DatasetManifest>, StageError> {
        let configured = self
            .cfg
            .config
            .noise
            .external_pool
            .as_ref()
            .map(|p| self.cfg.resolve(p));
        match path.map(Path::to_path_buf).or(configured) {
            None => Ok(None),
            Some(p) if !p.is_file() => Err(StageError::Precondition(format!(
                "external pool {} not found",
                p.display()
            ))),
            Some(p) => Ok(Some(read_manifest(&p)?)),
        }
    }

    fn write_cell(
        &self,
        dir: &Path,
        kind: NoiseKind,
        fraction: f64,
        noisy: &mut DatasetManifest,
        log: &webharvest_core::noise::ReplacementLog,
    ) -> Result<PathBuf, StageError> {
        let name = noise_cell_name(kind, fraction);
        noisy.config_hash = Some(self.cfg.hash.clone());
        let path = dir.join(format!("{name}.jsonl"));
        write_manifest(noisy, &path)?;
        write_replacement_log(
            log,
            Some(&self.cfg.hash),
            &dir.join(format!("{name}.log.jsonl")),
        )?;
        Ok(path)
    }

    pub fn noise_inject(
        &self,
        kind: NoiseKind,
        fraction: f64,
        manifest: Option<&Path>,
        external_pool: Option<&Path>,
        out_dir: Option<&Path>,
    ) -> Result<PathBuf, StageError> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(StageError::Config(format!(
                "fraction {fraction} outside [0, 1]"
            )));
        }
        let (_, original) = self.input_manifest(manifest)?;
        let pool = self.external_pool(external_pool)?;
        if kind == NoiseKind::External && pool.is_none() {
            return Err(StageError::Config(
                "external noise needs --external-pool".into(),
            ));
        }
        let spec = NoiseSpec {
            kind,
            fraction,
            seed: self.cfg.config.seed,
            external_pool: pool.as_ref(),
        };
        let (mut noisy, log) =
            inject_noise(&original, &spec).map_err(|e| StageError::Failed(e.to_string()))?;
        let dir = out_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.work(NOISE_DIR));
        let path = self.write_cell(&dir, kind, fraction, &mut noisy, &log)?;
        log::info!(
            "noise {kind} {fraction}: {} replacements -> {}",
            log.replacements.len(),
            path.display()
        );
        Ok(path)
    }

    pub fn noise_grid(
        &self,
        kinds: &[NoiseKind],
        fractions: Option<&[f64]>,
        manifest: Option<&Path>,
        external_pool: Option<&Path>,
        out_dir: Option<&Path>,
    ) -> Result<Vec<PathBuf>, StageError> {
        let fractions = fractions.unwrap_or(&self.cfg.config.noise.fractions);
        if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(StageError::Config(format!("fraction {f} outside [0, 1]")));
        }
        let (_, original) = self.input_manifest(manifest)?;
        let pool = self.external_pool(external_pool)?;
        if kinds.contains(&NoiseKind::External) && pool.is_none() {
            return Err(StageError::Config(
                "external noise needs --external-pool".into(),
            ));
        }
        let dir = out_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.work(NOISE_DIR));
        let mut written = Vec::new();
        let mut failed = Vec::new();
        for cell in noise_grid(
            &original,
            kinds,
            fractions,
            self.cfg.config.seed,
            pool.as_ref(),
        ) {
            match cell.outcome {
                Ok((mut noisy, log)) => {
                    written.push(self.write_cell(
                        &dir,
                        cell.kind,
                        cell.fraction,
                        &mut noisy,
                        &log,
                    )?);
                }
                Err(e) => {
                    log::error!("noise {} {}: {e}", cell.kind, cell.fraction);
                    failed.push(format!(
                        "{}: {e}",
                        noise_cell_name(cell.kind, cell.fraction)
                    ));
                }
            }
        }
        log::info!(
            "noise grid: {} cells written, {} failed",
            written.len(),
            failed.len()
        );
        if !failed.is_empty() {
            return Err(StageError::Partial(format!(
                "grid cells failed: {}",
                failed.join("; ")
            )));
        }
        Ok(written)
    }

    // ---- audit ----

    /// Audits one noisy manifest, or every cell in the noise directory.
    pub fn audit(
        &self,
        original: Option<&Path>,
        noisy: Option<&Path>,
        log: Option<&Path>,
    ) -> Result<AuditFile, StageError> {
        let (_, original) = self.input_manifest(original)?;
        let pairs: Vec<(PathBuf, PathBuf)> = match (noisy, log) {
            (Some(n), Some(l)) => vec![(n.into(), l.into())],
            (Some(n), None) => vec![(n.into(), log_path_for(n))],
            (None, Some(_)) => return Err(StageError::Config("--log needs --noisy".into())),
            (None, None) => {
                let dir = self.work(NOISE_DIR);
                let entries = std::fs::read_dir(&dir).map_err(|_| {
                    StageError::Precondition(format!(
                        "{} not found; run `noise` first",
                        dir.display()
                    ))
                })?;
                let mut logs: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.to_string_lossy().ends_with(".log.jsonl"))
                    .collect();
                logs.sort();
                logs.into_iter()
                    .map(|l| {
                        (
                            PathBuf::from(l.to_string_lossy().replace(".log.jsonl", ".jsonl")),
                            l,
                        )
                    })
                    .collect()
            }
        };
        if pairs.is_empty() {
            return Err(StageError::Precondition(
                "no noisy manifests to audit".into(),
            ));
        }
        let mut audits = Vec::new();
        for (noisy_path, log_path) in pairs {
            for p in [&noisy_path, &log_path] {
                if !p.is_file() {
                    return Err(StageError::Precondition(format!(
                        "{} not found",
                        p.display()
                    )));
                }
            }
            let noisy = read_manifest(&noisy_path)?;
            let replacement_log = read_replacement_log(&log_path)?;
            let outcome = match audit_noise(&original, &noisy, &replacement_log) {
                Ok(report) => {
                    log::info!(
                        "audit {}: {} replaced, realized {:.4}",
                        noisy_path.display(),
                        report.total_replaced,
                        report.realized_fraction
                    );
                    AuditOutcome::Report(report)
                }
                Err(e) => {
                    log::error!("audit {}: {e}", noisy_path.display());
                    AuditOutcome::Error(e.to_string())
                }
            };
            audits.push(AuditEntry {
                manifest: noisy_path.display().to_string(),
                outcome,
            });
        }
        let file = AuditFile {
            config_hash: self.cfg.hash.clone(),
            audits,
        };
        write_json(&self.work(AUDIT), &file)?;
        let bad = file
            .audits
            .iter()
            .filter(|a| match &a.outcome {
                AuditOutcome::Report(r) => !(r.counts_exact && r.kind_consistent),
                AuditOutcome::Error(_) => true,
            })
            .count();
        if bad > 0 {
            return Err(StageError::Failed(format!(
                "{bad} of {} audits failed",
                file.audits.len()
            )));
        }
        Ok(file)
    }

    // ---- project ----

    /// Writes a 2-D PCA of one class's images as `image_id,x,y,label`.
    ///
    /// Without manifests the class's deduplicated pool is projected and each
    /// point is labelled with its query origin; with manifests, the class's
    /// entries in each manifest are labelled with the manifest's file stem.
    pub fn project(
        &self,
        class: Option<&str>,
        manifests: &[PathBuf],
        out: Option<&Path>,
    ) -> Result<PathBuf, StageError> {
        let class = match class {
            Some(c) => self
                .cfg
                .classes
                .iter()
                .find(|k| k.class_id == c || k.name == c)
                .ok_or_else(|| StageError::Config(format!("unknown class {c:?}")))?,
            None => &self.cfg.classes[0],
        };
        let features_path = self.require(FEATURES, "embed")?;
        let features =
            read_features(&features_path).map_err(|e| StageError::Failed(e.to_string()))?;

        let mut points: Vec<(ImageId, String)> = Vec::new();
        if manifests.is_empty() {
            let (kept, _) = self.kept()?;
            for r in kept
                .get(&class.class_id)
                .map(Vec::as_slice)
                .unwrap_or_default()
            {
                points.push((r.image_id.clone().unwrap(), r.origin.to_string()));
            }
        } else {
            for path in manifests {
                let m = read_manifest(path)?;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                points.extend(
                    m.entries
                        .into_iter()
                        .filter(|e| e.label == class.name)
                        .map(|e| (e.id, stem.clone())),
                );
            }
        }
        let store = ContentStore::new(&self.cfg.work_dir);
        let mut extra: HashMap<ImageId, Vec<f64>> = HashMap::new();
        if !manifests.is_empty() && self.cfg.config.embedding == Embedding::Builtin {
            // images outside the harvested pool are embedded on the fly
            for path in manifests {
                for e in read_manifest(path)?.entries {
                    if e.label == class.name
                        && !features.contains_key(&e.id)
                        && !extra.contains_key(&e.id)
                    {
                        let file = store.resolve(&e.path);
                        let rgb = imaging::decode_file(&file)
                            .map_err(|err| StageError::Failed(err.to_string()))?;
                        extra.insert(e.id, rgb.embed());
                    }
                }
            }
        }
        let mut vectors = Vec::with_capacity(points.len());
        for (id, _) in &points {
            let v = features
                .get(id)
                .map(|f| f.values.clone())
                .or_else(|| extra.get(id).cloned())
                .ok_or_else(|| {
                    StageError::Precondition(format!("no feature vector for image {id}"))
                })?;
            vectors.push(v);
        }
        if vectors.is_empty() {
            return Err(StageError::Precondition(format!(
                "class {} has no images to project",
                class.class_id
            )));
        }
        let projection = pca_project(&vectors, 2).map_err(|e| StageError::Failed(e.to_string()))?;
        let mut csv = format!("# config_hash: {}\nimage_id,x,y,label\n", self.cfg.hash);
        for ((id, label), p) in points.iter().zip(&projection.points) {
            let _ = writeln!(csv, "{id},{},{},{}", p[0], p[1], csv_field(label));
        }
        let path = out
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.work(&format!("pca-{}.csv", class.class_id)));
        write_atomic(&path, |w| w.write_all(csv.as_bytes()))?;
        log::info!(
            "project {}: {} points, explained variance ratio {:?}",
            class.class_id,
            points.len(),
            projection.explained_variance_ratio
        );
        Ok(path)
    }

    /// expand → search → fetch → dedup → embed → score → assemble.
    pub fn run_all(&self) -> Result<PathBuf, StageError> {
        if self.cfg.config.strategy != Strategy::Crap {
            self.expand()?;
        }
        self.search()?;
        self.fetch()?;
        self.dedup(None)?;
        if self.cfg.config.strategy != Strategy::Crap {
            self.embed()?;
            self.score(None, None)?;
        }
        self.assemble(None, None, None)
    }
}

fn log_path_for(noisy: &Path) -> PathBuf {
    let s = noisy.to_string_lossy();
    PathBuf::from(match s.strip_suffix(".jsonl") {
        Some(stem) => format!("{stem}.log.jsonl"),
        None => format!("{s}.log.jsonl"),
    })
}

fn write_score_row(csv: &mut String, s: &ScoredExpansion, selected: bool) {
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{},{},{}",
        csv_field(&s.stats.class_id),
        csv_field(&s.stats.keyword),
        s.stats.d,
        s.stats.s,
        s.stats.dup,
        s.dup_max,
        s.score,
        selected
    );
}

fn group_by_class(records: &[ImageRecord]) -> BTreeMap<&str, Vec<&ImageRecord>> {
    let mut out: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.class_id.as_str()).or_default().push(r);
    }
    out
}

/// Expansion keywords present in `records`, in keyword-rank order when known.
fn expansion_keywords(records: &[ImageRecord], order: Option<&Vec<String>>) -> Vec<String> {
    let mut present: Vec<String> = Vec::new();
    for r in records {
        if let Some(k) = r.origin.keyword() {
            if !present.iter().any(|p| p == k) {
                present.push(k.to_string());
            }
        }
    }
    let rank = |k: &String| {
        order
            .and_then(|o| o.iter().position(|x| x == k))
            .unwrap_or(usize::MAX)
    };
    present.sort_by_key(|k| rank(k));
    present
}

fn dedup_class(
    class: &ConceptClass,
    fetched: &[ImageRecord],
    order: Option<&Vec<String>>,
    threshold: u32,
) -> Result<ClassDedup, StageError> {
    let fail = |e: webharvest_core::dedup::DedupError| {
        StageError::Failed(format!("{}: {e}", class.class_id))
    };
    let mut per_query = Vec::new();
    let mut survivors: BTreeMap<Origin, Vec<ImageRecord>> = BTreeMap::new();
    for (origin, group) in group_by_origin(fetched) {
        let report = dedup_per_query(&group, threshold).map_err(fail)?;
        let kept: Vec<ImageRecord> = report.kept_records(&group).into_iter().cloned().collect();
        survivors.insert(origin.clone(), kept);
        per_query.push(QueryDedup { origin, report });
    }
    let base = survivors.remove(&Origin::Base).unwrap_or_default();
    let keywords = expansion_keywords(fetched, order);
    let expansions: Vec<(&str, &[ImageRecord])> = keywords
        .iter()
        .map(|k| {
            let recs = survivors
                .get(&Origin::Expansion(k.clone()))
                .map(Vec::as_slice)
                .unwrap_or_default();
            (k.as_str(), recs)
        })
        .collect();
    let cross = dedup_cross_expansion(&base, &expansions, threshold).map_err(fail)?;
    Ok(ClassDedup {
        class_id: class.class_id.clone(),
        per_query,
        cross,
    })
}
