use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use webharvest_core::model::{ConceptClass, Expansion, ImageRecord, Origin};

use super::{
    fetch_image, search_images, AcquireError, ContentStore, EngineConfig, EngineGate, Fetcher,
    RetryPolicy,
};
use super::{SearchBackend, SearchResult};

/// A search result tagged with the class and query that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub class_id: String,
    pub origin: Origin,
    #[serde(flatten)]
    pub result: SearchResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryFailure {
    pub class_id: String,
    pub query: String,
    pub engine: String,
    pub error: String,
}

/// Outcome of harvesting one class.
#[derive(Debug, Clone, Default)]
pub struct Harvest {
    pub records: Vec<ImageRecord>,
    pub queries: usize,
    pub failures: Vec<QueryFailure>,
}

/// Runs searches and downloads on a bounded worker pool, with per-engine
/// concurrency caps and request spacing.
///
/// Outputs are ordered by (query, engine, rank) whatever order the workers
/// finish in: base query first, expansions by keyword rank, engines in
/// configuration order.
pub struct Harvester<'a> {
    search: &'a dyn SearchBackend,
    fetcher: &'a dyn Fetcher,
    store: &'a ContentStore,
    engines: Vec<EngineConfig>,
    retry: RetryPolicy,
    gates: Mutex<BTreeMap<String, Arc<EngineGate>>>,
    pool: rayon::ThreadPool,
}

impl<'a> Harvester<'a> {
    pub fn new(
        search: &'a dyn SearchBackend,
        fetcher: &'a dyn Fetcher,
        store: &'a ContentStore,
        engines: Vec<EngineConfig>,
        workers: usize,
        retry: RetryPolicy,
    ) -> Result<Self, AcquireError> {
        for (i, e) in engines.iter().enumerate() {
            e.validate()?;
            if engines[..i].iter().any(|o| o.tag == e.tag) {
                return Err(AcquireError::Config(format!(
                    "engine {:?} listed twice",
                    e.tag
                )));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .thread_name(|i| format!("harvest-{i}"))
            .build()
            .map_err(|e| AcquireError::Config(format!("worker pool: {e}")))?;
        Ok(Harvester {
            search,
            fetcher,
            store,
            engines,
            retry,
            gates: Mutex::new(BTreeMap::new()),
            pool,
        })
    }

    pub fn engines(&self) -> &[EngineConfig] {
        &self.engines
    }

    fn gate(&self, engine: &EngineConfig) -> Arc<EngineGate> {
        let mut gates = self.gates.lock().unwrap_or_else(|e| e.into_inner());
        gates
            .entry(engine.tag.clone())
            .or_insert_with(|| {
                Arc::new(EngineGate::new(
                    engine.max_concurrent_requests,
                    engine.min_request_interval,
                ))
            })
            .clone()
    }

    fn engine_for(&self, tag: &str) -> EngineConfig {
        self.engines
            .iter()
            .find(|e| e.tag == tag)
            .cloned()
            .unwrap_or_else(|| EngineConfig::new(tag))
    }

    fn run_queries(
        &self,
        class: &ConceptClass,
        queries: &[(Origin, String)],
        engines: &[EngineConfig],
    ) -> Result<(Vec<SearchHit>, Vec<QueryFailure>), AcquireError> {
        let jobs: Vec<(&(Origin, String), &EngineConfig)> = queries
            .iter()
            .flat_map(|q| engines.iter().map(move |e| (q, e)))
            .collect();
        let answers: Vec<Result<Vec<SearchResult>, AcquireError>> = self.pool.install(|| {
            jobs.par_iter()
                .map(|((_, query), engine)| {
                    let gate = self.gate(engine);
                    self.retry.run(
                        || {
                            let _permit = gate.acquire();
                            search_images(self.search, query, engine)
                        },
                        AcquireError::is_retriable,
                    )
                })
                .collect()
        });

        let mut hits = Vec::new();
        let mut failures = Vec::new();
        for (((origin, query), engine), answer) in jobs.into_iter().zip(answers) {
            match answer {
                Ok(results) => hits.extend(results.into_iter().map(|result| SearchHit {
                    class_id: class.class_id.clone(),
                    origin: origin.clone(),
                    result,
                })),
                Err(e) if e.is_config() => return Err(e),
                Err(e) => {
                    log::warn!("{} {query:?} on {}: {e}", class.class_id, engine.tag);
                    failures.push(QueryFailure {
                        class_id: class.class_id.clone(),
                        query: query.clone(),
                        engine: engine.tag.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        if !jobs_empty(queries, engines) && failures.len() == queries.len() * engines.len() {
            return Err(AcquireError::AllQueriesFailed {
                class: class.class_id.clone(),
                queries: failures.len(),
            });
        }
        Ok((hits, failures))
    }

    /// Issues the base query plus one query per expansion on every engine.
    pub fn search_class(
        &self,
        class: &ConceptClass,
        expansions: &[Expansion],
    ) -> Result<(Vec<SearchHit>, Vec<QueryFailure>), AcquireError> {
        if self.engines.is_empty() {
            return Err(AcquireError::Config("no search engines configured".into()));
        }
        let mut ordered: Vec<&Expansion> = expansions.iter().collect();
        ordered.sort_by_key(|e| e.rank);
        let queries: Vec<(Origin, String)> = std::iter::once((Origin::Base, class.name.clone()))
            .chain(
                ordered
                    .iter()
                    .map(|e| (Origin::Expansion(e.keyword.clone()), e.query(class))),
            )
            .collect();
        self.run_queries(class, &queries, &self.engines)
    }

    /// Base query only, on one engine, keeping up to `max_images` results.
    pub fn search_crap(
        &self,
        class: &ConceptClass,
        engine: &EngineConfig,
        max_images: usize,
    ) -> Result<(Vec<SearchHit>, Vec<QueryFailure>), AcquireError> {
        let mut engine = engine.clone();
        engine.top_k = max_images;
        if max_images == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        self.run_queries(
            class,
            &[(Origin::Base, class.name.clone())],
            std::slice::from_ref(&engine),
        )
    }

    /// Downloads every hit; the output has one record per hit, in hit order.
    pub fn fetch(&self, class: &ConceptClass, hits: &[SearchHit]) -> Vec<ImageRecord> {
        let engines: BTreeMap<&str, EngineConfig> = hits
            .iter()
            .map(|h| (h.result.engine.as_str(), self.engine_for(&h.result.engine)))
            .collect();
        self.pool.install(|| {
            hits.par_iter()
                .map(|hit| {
                    let gate = self.gate(&engines[hit.result.engine.as_str()]);
                    let _permit = gate.acquire();
                    fetch_image(
                        &hit.result,
                        hit.origin.clone(),
                        class,
                        self.fetcher,
                        self.store,
                        &self.retry,
                    )
                })
                .collect()
        })
    }

    pub fn harvest_class(
        &self,
        class: &ConceptClass,
        expansions: &[Expansion],
    ) -> Result<Harvest, AcquireError> {
        let (hits, failures) = self.search_class(class, expansions)?;
        Ok(Harvest {
            records: self.fetch(class, &hits),
            queries: (1 + expansions.len()) * self.engines.len(),
            failures,
        })
    }

    pub fn harvest_crap(
        &self,
        class: &ConceptClass,
        engine: &EngineConfig,
        max_images: usize,
    ) -> Result<Harvest, AcquireError> {
        let (hits, failures) = self.search_crap(class, engine, max_images)?;
        Ok(Harvest {
            records: self.fetch(class, &hits),
            queries: 1,
            failures,
        })
    }
}

fn jobs_empty(queries: &[(Origin, String)], engines: &[EngineConfig]) -> bool {
    queries.is_empty() || engines.is_empty()
}
