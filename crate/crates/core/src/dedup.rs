//! Two-stage near-duplicate removal.
//!
//! Records are visited in a fixed order and a record is dropped when it lies
//! within the Hamming threshold of a record already kept; it then points at
//! the earliest-ordered kept match. The kept set therefore has no pair within
//! the threshold, and running the same pass on it again changes nothing.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::BkTree;
use crate::model::{ImageRecord, Origin, RecordKey};
use crate::phash::PerceptualHash;

/// Hamming distance at or below which two images count as duplicates.
pub const DEFAULT_THRESHOLD: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DedupError {
    #[error("record {0} has not been fetched")]
    NotFetched(RecordKey),
    #[error("threshold {0} outside 0..=64")]
    Threshold(u32),
    #[error("record {found} does not belong to query {expected}")]
    MixedQuery { expected: String, found: RecordKey },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub record: RecordKey,
    pub duplicate_of: RecordKey,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub kept: Vec<RecordKey>,
    pub removed: Vec<Removal>,
    /// Per expansion keyword, how many of its images duplicate a base image.
    pub dup_counts: BTreeMap<String, u32>,
}

impl DedupReport {
    /// The input records that survived, in report order.
    pub fn kept_records<'a>(
        &self,
        records: impl IntoIterator<Item = &'a ImageRecord>,
    ) -> Vec<&'a ImageRecord> {
        let by_key: BTreeMap<RecordKey, &ImageRecord> =
            records.into_iter().map(|r| (r.key(), r)).collect();
        self.kept
            .iter()
            .filter_map(|k| by_key.get(k).copied())
            .collect()
    }
}

fn check_threshold(threshold: u32) -> Result<(), DedupError> {
    if threshold > 64 {
        return Err(DedupError::Threshold(threshold));
    }
    Ok(())
}

fn hash_of(record: &ImageRecord) -> Result<PerceptualHash, DedupError> {
    match record.phash {
        Some(h) if record.is_fetched() => Ok(h),
        _ => Err(DedupError::NotFetched(record.key())),
    }
}

/// Survivor order inside one query: engine tag, then result rank.
fn by_engine_rank(records: &[ImageRecord]) -> Vec<&ImageRecord> {
    let mut ordered: Vec<&ImageRecord> = records.iter().collect();
    ordered.sort_by(|a, b| {
        (a.engine.as_str(), a.result_rank, a.url.as_str()).cmp(&(
            b.engine.as_str(),
            b.result_rank,
            b.url.as_str(),
        ))
    });
    ordered
}

/// Kept records indexed by hash; the payload is the visit order so the
/// earliest match wins.
struct KeptSet<'a> {
    tree: BkTree<(usize, &'a ImageRecord)>,
    next: usize,
}

impl<'a> KeptSet<'a> {
    fn new() -> Self {
        Self {
            tree: BkTree::new(),
            next: 0,
        }
    }

    fn first_match(&self, hash: PerceptualHash, threshold: u32) -> Option<&'a ImageRecord> {
        self.tree
            .within(hash, threshold)
            .into_iter()
            .min_by_key(|((order, _), _)| *order)
            .map(|((_, r), _)| *r)
    }

    fn insert(&mut self, hash: PerceptualHash, record: &'a ImageRecord) {
        self.tree.insert(hash, (self.next, record));
        self.next += 1;
    }
}

/// Removes copies of the same image returned by several engines for one query.
pub fn dedup_per_query(records: &[ImageRecord], threshold: u32) -> Result<DedupReport, DedupError> {
    check_threshold(threshold)?;
    if let Some(first) = records.first() {
        for r in records {
            if r.class_id != first.class_id || r.origin != first.origin {
                return Err(DedupError::MixedQuery {
                    expected: alloc::format!("{}/{}", first.class_id, first.origin),
                    found: r.key(),
                });
            }
        }
    }
    for r in records {
        hash_of(r)?;
    }

    let mut report = DedupReport::default();
    let mut kept = KeptSet::new();
    for record in by_engine_rank(records) {
        let hash = hash_of(record)?;
        match kept.first_match(hash, threshold) {
            Some(original) => report.removed.push(Removal {
                record: record.key(),
                duplicate_of: original.key(),
            }),
            None => {
                kept.insert(hash, record);
                report.kept.push(record.key());
            }
        }
    }
    Ok(report)
}

/// Removes images shared between expansions and the base class, counting for
/// each keyword how many of its images the base class already had.
///
/// `expansions` is visited in the given order, which should be keyword rank.
/// Base images always keep the canonical copy. Images duplicated between two
/// expansions are removed from the later one without affecting its count.
pub fn dedup_cross_expansion(
    base: &[ImageRecord],
    expansions: &[(&str, &[ImageRecord])],
    threshold: u32,
) -> Result<DedupReport, DedupError> {
    check_threshold(threshold)?;
    for r in base
        .iter()
        .chain(expansions.iter().flat_map(|(_, rs)| rs.iter()))
    {
        hash_of(r)?;
    }

    let mut report = DedupReport::default();
    let mut base_kept = KeptSet::new();
    for record in by_engine_rank(base) {
        let hash = hash_of(record)?;
        match base_kept.first_match(hash, threshold) {
            Some(original) => report.removed.push(Removal {
                record: record.key(),
                duplicate_of: original.key(),
            }),
            None => {
                base_kept.insert(hash, record);
                report.kept.push(record.key());
            }
        }
    }

    let mut expansion_kept = KeptSet::new();
    for (keyword, records) in expansions {
        let count = report.dup_counts.entry(String::from(*keyword)).or_insert(0);
        for record in by_engine_rank(records) {
            let hash = hash_of(record)?;
            if let Some(original) = base_kept.first_match(hash, threshold) {
                *count += 1;
                report.removed.push(Removal {
                    record: record.key(),
                    duplicate_of: original.key(),
                });
            } else if let Some(original) = expansion_kept.first_match(hash, threshold) {
                report.removed.push(Removal {
                    record: record.key(),
                    duplicate_of: original.key(),
                });
            } else {
                expansion_kept.insert(hash, record);
                report.kept.push(record.key());
            }
        }
    }
    Ok(report)
}

/// Groups fetched records by the query that produced them, base first and
/// then expansions in the order their keywords first appear.
pub fn group_by_origin(records: &[ImageRecord]) -> Vec<(Origin, Vec<ImageRecord>)> {
    let mut groups: Vec<(Origin, Vec<ImageRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(o, _)| *o == r.origin) {
            Some((_, list)) => list.push(r.clone()),
            None => groups.push((r.origin.clone(), alloc::vec![r.clone()])),
        }
    }
    groups.sort_by_key(|(o, _)| !matches!(o, Origin::Base));
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConceptClass, ContentDigest};
    use alloc::format;
    use alloc::vec;

    fn record(origin: Origin, engine: &str, rank: u32, hash: u64) -> ImageRecord {
        let class = ConceptClass::new("c1", "desk", None, 1).unwrap();
        let mut r = ImageRecord::pending(
            &class,
            origin,
            engine,
            rank,
            format!("http://{engine}/{rank}"),
        );
        let mut digest = [0u8; 32];
        digest[..8].copy_from_slice(&hash.to_le_bytes());
        digest[8..12].copy_from_slice(&rank.to_le_bytes());
        r.mark_fetched(
            ContentDigest(digest),
            PerceptualHash(hash),
            format!("store/{hash:x}"),
        );
        r
    }

    #[test]
    fn identical_images_keep_first_engine() {
        let a = record(Origin::Base, "yahoo", 1, 0xdead_beef);
        let b = record(Origin::Base, "bing", 4, 0xdead_beef);
        let report = dedup_per_query(&[a.clone(), b.clone()], DEFAULT_THRESHOLD).unwrap();
        assert_eq!(report.kept, vec![b.key()]);
        assert_eq!(
            report.removed,
            vec![Removal {
                record: a.key(),
                duplicate_of: b.key()
            }]
        );
    }

    #[test]
    fn single_record_is_kept() {
        let a = record(Origin::Base, "google", 1, 5);
        let report = dedup_per_query(core::slice::from_ref(&a), 8).unwrap();
        assert_eq!(report.kept, vec![a.key()]);
        assert!(report.removed.is_empty());
    }

    #[test]
    fn rejects_unfetched_and_bad_threshold() {
        let class = ConceptClass::new("c1", "desk", None, 1).unwrap();
        let pending = ImageRecord::pending(&class, Origin::Base, "google", 1, "http://x");
        assert!(matches!(
            dedup_per_query(&[pending], 8),
            Err(DedupError::NotFetched(_))
        ));
        assert_eq!(dedup_per_query(&[], 65), Err(DedupError::Threshold(65)));
    }

    #[test]
    fn mixed_queries_rejected() {
        let a = record(Origin::Base, "google", 1, 5);
        let b = record(Origin::Expansion("dog".into()), "google", 1, 9);
        assert!(matches!(
            dedup_per_query(&[a, b], 8),
            Err(DedupError::MixedQuery { .. })
        ));
    }

    #[test]
    fn cross_expansion_counts_shared_images() {
        let base: Vec<_> = (0..5)
            .map(|i| record(Origin::Base, "google", i + 1, 1u64 << (i * 12) | 0xff))
            .collect();
        let kw = Origin::Expansion("dog".into());
        let mut exp: Vec<_> = (0..3)
            .map(|i| {
                record(
                    kw.clone(),
                    "google",
                    i + 1,
                    base[i as usize].phash.unwrap().0,
                )
            })
            .collect();
        exp.extend((0..7).map(|i| {
            record(
                kw.clone(),
                "yahoo",
                i + 1,
                0xaaaa_0000_0000_0000u64.rotate_left(i * 9) ^ 0x5555,
            )
        }));
        let report = dedup_cross_expansion(&base, &[("dog", &exp)], 0).unwrap();
        assert_eq!(report.dup_counts["dog"], 3);
        assert_eq!(report.kept.len(), 5 + 7);
        assert_eq!(report.removed.len(), 3);
    }

    #[test]
    fn total_overlap_and_disjoint() {
        let base: Vec<_> = (0..4)
            .map(|i| record(Origin::Base, "g", i + 1, 0x0f0f << (i * 16)))
            .collect();
        let same: Vec<_> = base
            .iter()
            .map(|b| {
                record(
                    Origin::Expansion("same".into()),
                    "g",
                    b.result_rank,
                    b.phash.unwrap().0,
                )
            })
            .collect();
        let other: Vec<_> = (0..4)
            .map(|i| {
                record(
                    Origin::Expansion("other".into()),
                    "g",
                    i + 1,
                    !(0x0f0fu64 << (i * 16)),
                )
            })
            .collect();
        let report =
            dedup_cross_expansion(&base, &[("same", &same), ("other", &other)], 4).unwrap();
        assert_eq!(report.dup_counts["same"], 4);
        assert_eq!(report.dup_counts["other"], 0);
        assert_eq!(report.kept.len(), 8);
    }

    #[test]
    fn expansion_to_expansion_duplicates_do_not_count() {
        let base = vec![record(Origin::Base, "g", 1, 0)];
        let a = vec![record(Origin::Expansion("a".into()), "g", 1, u64::MAX)];
        let b = vec![record(Origin::Expansion("b".into()), "g", 1, u64::MAX)];
        let report = dedup_cross_expansion(&base, &[("a", &a), ("b", &b)], 8).unwrap();
        assert_eq!(report.dup_counts["b"], 0);
        assert_eq!(report.removed[0].duplicate_of, a[0].key());
    }
}
