//! The assembled, labeled dataset.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ImageId, ImageRecord, Origin};
use crate::phash::PerceptualHash;

/// How the per-class image lists were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Single low-restriction engine, base query only, first images by rank.
    Crap,
    /// Base images then expansions in keyword order.
    Top,
    /// Uniform sample of the whole deduplicated pool.
    Random,
    /// Uniform sample of base plus the best-scoring expansions.
    Filtered,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Crap => "crap",
            Strategy::Top => "top",
            Strategy::Random => "random",
            Strategy::Filtered => "filtered",
        })
    }
}

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "crap" => Ok(Strategy::Crap),
            "top" => Ok(Strategy::Top),
            "random" => Ok(Strategy::Random),
            "filtered" => Ok(Strategy::Filtered),
            _ => Err(UnknownStrategy(s.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy {0:?} (expected crap, top, random or filtered)")]
pub struct UnknownStrategy(pub String);

/// One labeled image of a manifest. Field names are the on-disk keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: ImageId,
    /// Class name the image is labeled with.
    pub label: String,
    pub path: String,
    /// Class id the image was harvested for.
    pub class: String,
    pub origin: Origin,
    pub engine: String,
    pub rank: u32,
    pub url: String,
    pub phash: PerceptualHash,
}

impl ManifestEntry {
    /// Builds an entry from a fetched record; `None` if the record was not fetched.
    pub fn from_record(record: &ImageRecord) -> Option<Self> {
        if !record.is_fetched() {
            return None;
        }
        Some(Self {
            id: record.image_id.clone()?,
            label: record.label.clone(),
            path: record.local_path.clone()?,
            class: record.class_id.clone(),
            origin: record.origin.clone(),
            engine: record.engine.clone(),
            rank: record.result_rank,
            url: record.url.clone(),
            phash: record.phash?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("image id {0} appears more than once")]
pub struct DuplicateImageId(pub ImageId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub strategy: Strategy,
    pub seed: u64,
    /// Hash of the pipeline configuration that produced the manifest.
    pub config_hash: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            config_hash: None,
            entries: Vec::new(),
        }
    }

    /// Histogram of labels over the entries.
    pub fn per_class_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.label.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn check_unique_ids(&self) -> Result<(), DuplicateImageId> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(DuplicateImageId(e.id.clone()));
            }
        }
        Ok(())
    }
}
