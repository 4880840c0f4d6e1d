//! Dataset assembly under the four collection strategies.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::manifest::{DatasetManifest, ManifestEntry, Strategy};
use crate::model::{ConceptClass, ImageRecord, Origin, RecordKey};
use crate::rng::SampleRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shortfall {
    pub class_id: String,
    pub available: usize,
    pub needed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssembleError {
    #[error("not enough images for {}: {}", .0.len(), describe(.0))]
    Shortfall(Vec<Shortfall>),
    #[error("class {0} has no expansion selection; run scoring first")]
    MissingScores(String),
    #[error("record {0} in the pool has not been fetched")]
    NotFetched(RecordKey),
    #[error("target count must be at least 1")]
    ZeroTarget,
}

fn describe(s: &[Shortfall]) -> String {
    let parts: Vec<String> = s
        .iter()
        .map(|x| alloc::format!("{} ({} of {})", x.class_id, x.available, x.needed))
        .collect();
    parts.join(", ")
}

/// Deduplicated images available for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPool {
    pub class: ConceptClass,
    pub records: Vec<ImageRecord>,
    /// Expansion keywords in keyword-service rank order.
    pub expansion_order: Vec<String>,
    /// Keywords picked by scoring; required by the filtered strategy.
    pub selected: Option<Vec<String>>,
}

impl ClassPool {
    /// Records in canonical order: base first, then expansions by keyword
    /// rank, each by (result rank, engine).
    fn canonical(&self) -> Vec<&ImageRecord> {
        let mut out: Vec<&ImageRecord> = self.records.iter().collect();
        out.sort_by(|a, b| {
            (
                self.origin_order(&a.origin),
                a.result_rank,
                a.engine.as_str(),
                a.url.as_str(),
            )
                .cmp(&(
                    self.origin_order(&b.origin),
                    b.result_rank,
                    b.engine.as_str(),
                    b.url.as_str(),
                ))
        });
        out
    }

    fn origin_order<'a>(&self, origin: &'a Origin) -> (u8, usize, &'a str) {
        match origin {
            Origin::Base => (0, 0, ""),
            Origin::Expansion(k) => match self.expansion_order.iter().position(|x| x == k) {
                Some(p) => (1, p, ""),
                None => (2, 0, k.as_str()),
            },
        }
    }
}

/// Builds a manifest with exactly `target_count` images per class.
///
/// Classes are processed in class-id order. An image whose content id was
/// already claimed by an earlier class is dropped from later pools.
pub fn assemble(
    strategy: Strategy,
    pools: &[ClassPool],
    target_count: usize,
    seed: u64,
) -> Result<DatasetManifest, AssembleError> {
    if target_count == 0 {
        return Err(AssembleError::ZeroTarget);
    }
    let mut ordered: Vec<&ClassPool> = pools.iter().collect();
    ordered.sort_by(|a, b| a.class.class_id.cmp(&b.class.class_id));

    let mut claimed = BTreeSet::new();
    let mut candidates: Vec<(&ClassPool, Vec<&ImageRecord>)> = Vec::with_capacity(ordered.len());
    for pool in ordered {
        let allowed: Option<BTreeSet<&str>> = match strategy {
            Strategy::Filtered => Some(
                pool.selected
                    .as_ref()
                    .ok_or_else(|| AssembleError::MissingScores(pool.class.class_id.clone()))?
                    .iter()
                    .map(String::as_str)
                    .collect(),
            ),
            _ => None,
        };
        let mut list = Vec::new();
        let mut dropped = 0usize;
        for r in pool.canonical() {
            let id = match (&r.image_id, r.is_fetched()) {
                (Some(id), true) => id,
                _ => return Err(AssembleError::NotFetched(r.key())),
            };
            let usable = match (&r.origin, strategy) {
                (Origin::Base, _) => true,
                (Origin::Expansion(_), Strategy::Crap) => false,
                (Origin::Expansion(k), Strategy::Filtered) => {
                    allowed.as_ref().is_some_and(|a| a.contains(k.as_str()))
                }
                (Origin::Expansion(_), _) => true,
            };
            if !usable {
                continue;
            }
            if claimed.insert(id.clone()) {
                list.push(r);
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::warn!(
                "class {}: {dropped} images already claimed by another class were skipped",
                pool.class.class_id
            );
        }
        candidates.push((pool, list));
    }

    let short: Vec<Shortfall> = candidates
        .iter()
        .filter(|(_, list)| list.len() < target_count)
        .map(|(pool, list)| Shortfall {
            class_id: pool.class.class_id.clone(),
            available: list.len(),
            needed: target_count,
        })
        .collect();
    if !short.is_empty() {
        return Err(AssembleError::Shortfall(short));
    }

    let mut manifest = DatasetManifest::new(strategy, seed);
    for (pool, list) in candidates {
        let chosen: Vec<&ImageRecord> = match strategy {
            Strategy::Crap | Strategy::Top => list.into_iter().take(target_count).collect(),
            Strategy::Random | Strategy::Filtered => {
                let mut rng = SampleRng::for_class(seed, &pool.class.class_id);
                let mut picks = rng.sample_indices(list.len(), target_count);
                picks.sort_unstable();
                picks.into_iter().map(|i| list[i]).collect()
            }
        };
        manifest.entries.extend(
            chosen
                .into_iter()
                .map(|r| {
                    ManifestEntry::from_record(r).ok_or_else(|| AssembleError::NotFetched(r.key()))
                })
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ContentDigest;
    use crate::phash::PerceptualHash;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;

    fn rec(class: &ConceptClass, origin: Origin, engine: &str, rank: u32, tag: u32) -> ImageRecord {
        let mut r = ImageRecord::pending(
            class,
            origin,
            engine,
            rank,
            format!("http://{engine}/{tag}"),
        );
        let mut d = [0u8; 32];
        d[..4].copy_from_slice(&tag.to_be_bytes());
        d[4..8].copy_from_slice(&(class.class_id.len() as u32).to_be_bytes());
        d[8] = class.class_id.as_bytes()[0];
        r.mark_fetched(
            ContentDigest(d),
            PerceptualHash(u64::from(tag)),
            format!("store/{tag}"),
        );
        r
    }

    fn pool(base: u32, expansions: &[(&str, u32)]) -> ClassPool {
        let class = ConceptClass::new("n01", "desk", None, 1).unwrap();
        let mut tag = 0;
        let mut records = Vec::new();
        for rank in 1..=base {
            tag += 1;
            records.push(rec(&class, Origin::Base, "google", rank, tag));
        }
        for (k, n) in expansions {
            for rank in 1..=*n {
                tag += 1;
                records.push(rec(
                    &class,
                    Origin::Expansion(k.to_string()),
                    "google",
                    rank,
                    tag,
                ));
            }
        }
        ClassPool {
            class,
            records,
            expansion_order: expansions.iter().map(|(k, _)| k.to_string()).collect(),
            selected: None,
        }
    }

    #[test]
    fn top_takes_base_then_first_expansion_in_rank_order() {
        // miniature: base 3, first expansion 5, target 6 -> 3 base + ranks 1..3 of "a"
        let mini = pool(3, &[("a", 5), ("b", 5)]);
        let m = assemble(Strategy::Top, &[mini], 6, 0).unwrap();
        let got: Vec<(String, u32)> = m
            .entries
            .iter()
            .map(|e| (e.origin.to_string(), e.rank))
            .collect();
        let want: Vec<(String, u32)> = [("base", 1), ("base", 2), ("base", 3)]
            .iter()
            .map(|(o, r)| (o.to_string(), *r))
            .chain((1..=3).map(|r| ("expansion:a".to_string(), r)))
            .collect();
        assert_eq!(got, want);

        let full = pool(50, &[("a", 200), ("b", 200)]);
        let m = assemble(Strategy::Top, &[full], 230, 0).unwrap();
        assert_eq!(
            m.entries
                .iter()
                .filter(|e| e.origin == Origin::Base)
                .count(),
            50
        );
        let from_a: Vec<u32> = m
            .entries
            .iter()
            .filter(|e| e.origin.keyword() == Some("a"))
            .map(|e| e.rank)
            .collect();
        assert_eq!(from_a, (1..=180).collect::<Vec<_>>());
    }

    #[test]
    fn random_is_seed_deterministic() {
        let p = pool(20, &[("a", 30), ("b", 30)]);
        let a = assemble(Strategy::Random, core::slice::from_ref(&p), 25, 42).unwrap();
        let b = assemble(Strategy::Random, core::slice::from_ref(&p), 25, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.entries.len(), 25);
        assert!(a.check_unique_ids().is_ok());
        let c = assemble(Strategy::Random, &[p], 25, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn filtered_uses_only_selected_expansions() {
        let mut p = pool(
            300,
            &[
                ("a", 150),
                ("b", 150),
                ("c", 150),
                ("d", 150),
                ("e", 150),
                ("f", 150),
                ("g", 150),
            ],
        );
        p.selected = Some(vec![
            "a".into(),
            "c".into(),
            "d".into(),
            "f".into(),
            "g".into(),
        ]);
        let m = assemble(Strategy::Filtered, &[p.clone()], 600, 7).unwrap();
        assert_eq!(m.entries.len(), 600);
        assert!(m
            .entries
            .iter()
            .all(|e| !matches!(e.origin.keyword(), Some("b") | Some("e"))));
        p.selected = None;
        assert_eq!(
            assemble(Strategy::Filtered, &[p], 600, 7),
            Err(AssembleError::MissingScores("n01".into()))
        );
    }

    #[test]
    fn crap_uses_base_by_rank() {
        let p = pool(10, &[("a", 10)]);
        let m = assemble(Strategy::Crap, core::slice::from_ref(&p), 4, 0).unwrap();
        assert_eq!(
            m.entries.iter().map(|e| e.rank).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert!(matches!(
            assemble(Strategy::Crap, &[p], 11, 0),
            Err(AssembleError::Shortfall(_))
        ));
    }

    #[test]
    fn shortfall_lists_every_class() {
        let mut a = pool(2, &[]);
        let mut b = pool(3, &[]);
        a.class.class_id = "x".into();
        b.class.class_id = "y".into();
        for r in &mut b.records {
            r.class_id = "y".into();
            let mut d = r.content_digest.unwrap().0;
            d[15] = 1;
            let (h, path) = (r.phash.unwrap(), r.local_path.clone().unwrap());
            r.mark_fetched(ContentDigest(d), h, path);
        }
        match assemble(Strategy::Random, &[a, b], 5, 0) {
            Err(AssembleError::Shortfall(s)) => {
                assert_eq!(s.len(), 2);
                assert_eq!((s[0].available, s[1].available), (2, 3));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shared_images_go_to_first_class() {
        let a = pool(3, &[]);
        let mut b = a.clone();
        b.class.class_id = "n02".into();
        b.class.name = "table".into();
        let err = assemble(Strategy::Top, &[b.clone(), a.clone()], 3, 0).unwrap_err();
        assert!(matches!(err, AssembleError::Shortfall(ref s) if s[0].class_id == "n02"));
        let m = assemble(Strategy::Top, &[a], 3, 0).unwrap();
        assert_eq!(m.per_class_counts()["desk"], 3);
    }
}
