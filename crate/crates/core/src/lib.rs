//! Core algorithms for curating image-classification datasets from web
//! search results.
//!
//! Everything here is pure computation over in-memory values and only needs
//! `alloc`: perceptual hashing, near-duplicate removal, feature statistics,
//! expansion scoring, dataset assembly and label-noise injection. Reading and
//! writing files, talking to search engines and decoding images live in the
//! `webharvest` crate.
#![no_std]

extern crate alloc;

pub mod assemble;
pub mod dedup;
pub mod embed;
pub mod index;
pub mod manifest;
pub mod model;
pub mod noise;
pub mod pca;
pub mod phash;
pub mod rng;
pub mod score;
pub mod stats;

pub use assemble::{assemble, AssembleError, ClassPool};
pub use dedup::{dedup_cross_expansion, dedup_per_query, DedupError, DedupReport};
pub use manifest::{DatasetManifest, ManifestEntry, Strategy};
pub use model::{
    ConceptClass, ContentDigest, Expansion, FailureReason, FeatureVector, FetchStatus, ImageId,
    ImageRecord, ModelError, Origin, RecordKey,
};
pub use noise::{NoiseKind, NoiseSpec, Replacement, ReplacementLog};
pub use phash::{hamming, PerceptualHash};
pub use score::{expansion_score, rank_expansions, ScoredExpansion};
pub use stats::ExpansionStats;
