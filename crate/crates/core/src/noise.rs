//! Controlled label-noise injection and its audit.
//!
//! Every class of size `n` gets exactly `round_half_even(fraction · n)` of
//! its slots replaced. Slots are drawn uniformly without replacement per
//! class from a single seeded stream, classes visited in label order.
//!
//! * Internal noise: the images in the chosen slots are redistributed among
//!   the chosen slots of *other* classes and relabeled. Each substitute is a
//!   real image of another class, no image appears twice, and class sizes do
//!   not change. A valid assignment exists iff no class owns more than half
//!   of all chosen slots.
//! * External noise: substitutes are drawn without replacement from a pool
//!   whose labels and image ids are disjoint from the dataset's.
//!
//! The replacement log keeps each displaced entry so the injection can be
//! undone exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{DatasetManifest, ManifestEntry};
use crate::model::ImageId;
use crate::rng::{fnv1a64, SampleRng};

/// Noise levels 5%, 15%, ..., 85%.
pub const DEFAULT_FRACTIONS: [f64; 9] = [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// Image of another class in the dataset under this class's label.
    Internal,
    /// Image from outside the dataset's label set under this class's label.
    External,
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::Internal => "internal",
            NoiseKind::External => "external",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec<'a> {
    pub kind: NoiseKind,
    pub fraction: f64,
    pub seed: u64,
    pub external_pool: Option<&'a DatasetManifest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    /// Label of the class whose slot was replaced.
    pub class: String,
    pub slot_image_id: ImageId,
    pub substitute_image_id: ImageId,
    pub substitute_source_label: String,
    /// The displaced entry, kept so the injection can be reversed.
    pub slot_entry: ManifestEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementLog {
    pub kind: NoiseKind,
    pub fraction: f64,
    pub seed: u64,
    pub replacements: Vec<Replacement>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("noise fraction {0} outside [0, 1]")]
    Fraction(f64),
    #[error("internal noise needs at least two classes")]
    SingleClass,
    #[error("class {class} needs {slots} donors but other classes offer only {available}")]
    NoDonorAssignment {
        class: String,
        slots: usize,
        available: usize,
    },
    #[error("external noise requires an external pool")]
    MissingExternalPool,
    #[error("external pool has {have} images, {need} needed")]
    ExternalPoolTooSmall { need: usize, have: usize },
    #[error("external pool label {0:?} is also a dataset label")]
    ExternalLabelOverlap(String),
    #[error("external pool image {0} is also in the dataset")]
    ExternalIdOverlap(ImageId),
    #[error("cannot invert: substitute {0} not found in the noisy manifest")]
    InverseMismatch(ImageId),
}

/// `round_half_even(fraction · n)`.
pub fn replaced_count(fraction: f64, n: usize) -> usize {
    libm::rint(fraction * n as f64) as usize
}

fn positions_by_label(manifest: &DatasetManifest) -> BTreeMap<&str, Vec<usize>> {
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        by_label.entry(e.label.as_str()).or_default().push(i);
    }
    by_label
}

pub fn inject_noise(
    manifest: &DatasetManifest,
    spec: &NoiseSpec<'_>,
) -> Result<(DatasetManifest, ReplacementLog), NoiseError> {
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(NoiseError::Fraction(spec.fraction));
    }
    let classes = positions_by_label(manifest);
    if spec.kind == NoiseKind::Internal && classes.len() < 2 {
        return Err(NoiseError::SingleClass);
    }

    let mut rng = SampleRng::new(spec.seed);
    // (position, class label) of every slot to replace
    let mut slots: Vec<(usize, &str)> = Vec::new();
    let mut per_class: Vec<(&str, usize)> = Vec::with_capacity(classes.len());
    for (label, positions) in &classes {
        let r = replaced_count(spec.fraction, positions.len());
        per_class.push((label, r));
        for i in rng.sample_indices(positions.len(), r) {
            slots.push((positions[i], label));
        }
    }

    let substitutes: Vec<(&ManifestEntry, String)> = match spec.kind {
        NoiseKind::Internal => {
            let total = slots.len();
            for (label, r) in &per_class {
                if 2 * r > total {
                    return Err(NoiseError::NoDonorAssignment {
                        class: String::from(*label),
                        slots: *r,
                        available: total - r,
                    });
                }
            }
            let mut donor: Vec<usize> = (0..total).collect();
            rng.shuffle(&mut donor);
            for i in 0..total {
                let own = slots[i].1;
                if slots[donor[i]].1 != own {
                    continue;
                }
                let start = rng.below(total);
                let j = (0..total)
                    .map(|o| (start + o) % total)
                    .find(|&j| slots[j].1 != own && slots[donor[j]].1 != own)
                    .ok_or_else(|| NoiseError::NoDonorAssignment {
                        class: String::from(own),
                        slots: 0,
                        available: 0,
                    })?;
                donor.swap(i, j);
            }
            donor
                .iter()
                .map(|&d| {
                    let e = &manifest.entries[slots[d].0];
                    (e, e.label.clone())
                })
                .collect()
        }
        NoiseKind::External => {
            let pool = spec.external_pool.ok_or(NoiseError::MissingExternalPool)?;
            let labels = manifest.labels();
            if let Some(e) = pool
                .entries
                .iter()
                .find(|e| labels.contains(e.label.as_str()))
            {
                return Err(NoiseError::ExternalLabelOverlap(e.label.clone()));
            }
            let ids: BTreeSet<&ImageId> = manifest.entries.iter().map(|e| &e.id).collect();
            if let Some(e) = pool.entries.iter().find(|e| ids.contains(&e.id)) {
                return Err(NoiseError::ExternalIdOverlap(e.id.clone()));
            }
            if pool.entries.len() < slots.len() {
                return Err(NoiseError::ExternalPoolTooSmall {
                    need: slots.len(),
                    have: pool.entries.len(),
                });
            }
            rng.sample_indices(pool.entries.len(), slots.len())
                .into_iter()
                .map(|i| {
                    let e = &pool.entries[i];
                    (e, e.label.clone())
                })
                .collect()
        }
    };

    let mut noisy = manifest.clone();
    let mut replacements = Vec::with_capacity(slots.len());
    for ((pos, label), (substitute, source_label)) in slots.iter().zip(substitutes) {
        let original = &manifest.entries[*pos];
        let mut entry = substitute.clone();
        entry.label = String::from(*label);
        replacements.push(Replacement {
            class: String::from(*label),
            slot_image_id: original.id.clone(),
            substitute_image_id: entry.id.clone(),
            substitute_source_label: source_label,
            slot_entry: original.clone(),
        });
        noisy.entries[*pos] = entry;
    }
    let log = ReplacementLog {
        kind: spec.kind,
        fraction: spec.fraction,
        seed: spec.seed,
        replacements,
    };
    Ok((noisy, log))
}

/// Restores the manifest a log was produced from.
pub fn apply_inverse(
    noisy: &DatasetManifest,
    log: &ReplacementLog,
) -> Result<DatasetManifest, NoiseError> {
    let mut restored = noisy.clone();
    let position: BTreeMap<(&ImageId, &str), usize> = noisy
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| ((&e.id, e.label.as_str()), i))
        .collect();
    for r in &log.replacements {
        let pos = position
            .get(&(&r.substitute_image_id, r.class.as_str()))
            .ok_or_else(|| NoiseError::InverseMismatch(r.substitute_image_id.clone()))?;
        restored.entries[*pos] = r.slot_entry.clone();
    }
    Ok(restored)
}

/// Seed of one grid cell: `base_seed XOR fnv1a64("<kind>@<fraction in permille>")`.
pub fn cell_seed(base_seed: u64, kind: NoiseKind, fraction: f64) -> u64 {
    let permille = libm::rint(fraction * 1000.0) as u64;
    base_seed ^ fnv1a64(format!("{kind}@{permille}").as_bytes())
}

pub struct GridCell {
    pub kind: NoiseKind,
    pub fraction: f64,
    pub seed: u64,
    pub outcome: Result<(DatasetManifest, ReplacementLog), NoiseError>,
}

/// One noisy replica per (kind, fraction); failed cells carry their error.
pub fn noise_grid(
    manifest: &DatasetManifest,
    kinds: &[NoiseKind],
    fractions: &[f64],
    base_seed: u64,
    external_pool: Option<&DatasetManifest>,
) -> Vec<GridCell> {
    let mut cells = Vec::with_capacity(kinds.len() * fractions.len());
    for &kind in kinds {
        for &fraction in fractions {
            let seed = cell_seed(base_seed, kind, fraction);
            let spec = NoiseSpec {
                kind,
                fraction,
                seed,
                external_pool,
            };
            cells.push(GridCell {
                kind,
                fraction,
                seed,
                outcome: inject_noise(manifest, &spec),
            });
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAudit {
    pub size: usize,
    pub replaced: usize,
    /// `round_half_even(fraction · size)` for the logged fraction.
    pub expected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAuditReport {
    pub kind: NoiseKind,
    pub per_class: BTreeMap<String, ClassAudit>,
    pub total_replaced: usize,
    pub realized_fraction: f64,
    /// Every class has exactly the expected number of replacements.
    pub counts_exact: bool,
    /// Every substitute's source label is consistent with the noise kind.
    pub kind_consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("manifests differ in shape: {0}")]
    Shape(String),
    #[error("audit failed: {}", .0.join("; "))]
    Mismatch(Vec<String>),
}

/// Recomputes the replacements by diffing and checks them against the log.
pub fn audit_noise(
    original: &DatasetManifest,
    noisy: &DatasetManifest,
    log: &ReplacementLog,
) -> Result<NoiseAuditReport, AuditError> {
    if original.entries.len() != noisy.entries.len() {
        return Err(AuditError::Shape(format!(
            "{} entries vs {}",
            original.entries.len(),
            noisy.entries.len()
        )));
    }
    let labels = original.labels();
    let mut by_slot: BTreeMap<&ImageId, (usize, &Replacement)> = BTreeMap::new();
    let mut problems = Vec::new();
    for (i, r) in log.replacements.iter().enumerate() {
        if by_slot.insert(&r.slot_image_id, (i, r)).is_some() {
            problems.push(format!("slot {} logged twice", r.slot_image_id));
        }
    }

    let mut per_class: BTreeMap<String, ClassAudit> = BTreeMap::new();
    let mut used = BTreeSet::new();
    for (pos, (o, n)) in original.entries.iter().zip(&noisy.entries).enumerate() {
        let audit = per_class.entry(o.label.clone()).or_insert(ClassAudit {
            size: 0,
            replaced: 0,
            expected: 0,
        });
        audit.size += 1;
        if o.label != n.label {
            problems.push(format!(
                "entry {pos}: label changed from {} to {}",
                o.label, n.label
            ));
            continue;
        }
        if o == n {
            continue;
        }
        audit.replaced += 1;
        match by_slot.get(&o.id) {
            Some((i, r))
                if r.substitute_image_id == n.id && r.class == o.label && r.slot_entry == *o =>
            {
                used.insert(*i);
            }
            Some(_) => problems.push(format!(
                "entry {pos} ({}): replacement differs from the log",
                o.id
            )),
            None => problems.push(format!("entry {pos} ({}): replaced but not logged", o.id)),
        }
    }
    for (i, r) in log.replacements.iter().enumerate() {
        if !used.contains(&i) {
            problems.push(format!(
                "logged replacement of {} not found in the noisy manifest",
                r.slot_image_id
            ));
        }
    }

    let mut kind_consistent = true;
    for r in &log.replacements {
        let inside = labels.contains(r.substitute_source_label.as_str());
        let ok = match log.kind {
            NoiseKind::External => !inside,
            NoiseKind::Internal => inside && r.substitute_source_label != r.class,
        };
        if !ok {
            kind_consistent = false;
            problems.push(format!(
                "{} substitute {} has source label {}",
                log.kind, r.substitute_image_id, r.substitute_source_label
            ));
        }
    }
    if !problems.is_empty() {
        return Err(AuditError::Mismatch(problems));
    }

    for a in per_class.values_mut() {
        a.expected = replaced_count(log.fraction, a.size);
    }
    let total_replaced: usize = per_class.values().map(|a| a.replaced).sum();
    let size: usize = per_class.values().map(|a| a.size).sum();
    Ok(NoiseAuditReport {
        kind: log.kind,
        counts_exact: per_class.values().all(|a| a.replaced == a.expected),
        per_class,
        total_replaced,
        realized_fraction: if size > 0 {
            total_replaced as f64 / size as f64
        } else {
            0.0
        },
        kind_consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Strategy;
    use crate::model::Origin;
    use crate::phash::PerceptualHash;
    use alloc::vec;

    fn manifest(classes: usize, per_class: usize, prefix: &str) -> DatasetManifest {
        let mut m = DatasetManifest::new(Strategy::Random, 9);
        let mut counter = 0u64;
        for c in 0..classes {
            for k in 0..per_class {
                counter += 1;
                let seed = fnv1a64(prefix.as_bytes()) ^ counter;
                m.entries.push(ManifestEntry {
                    id: format!("{seed:016x}{counter:016x}").parse().unwrap(),
                    label: format!("{prefix}{c:02}"),
                    path: format!("store/{counter}"),
                    class: format!("{prefix}id{c:02}"),
                    origin: Origin::Base,
                    engine: "google".into(),
                    rank: k as u32 + 1,
                    url: format!("http://example.com/{counter}"),
                    phash: PerceptualHash(counter),
                });
            }
        }
        m
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(replaced_count(0.5, 5), 2);
        assert_eq!(replaced_count(0.5, 7), 4);
        assert_eq!(replaced_count(0.05, 1000), 50);
        assert_eq!(replaced_count(0.85, 1000), 850);
        assert_eq!(replaced_count(0.0, 10), 0);
    }

    #[test]
    fn zero_fraction_is_identity() {
        let m = manifest(3, 10, "c");
        for kind in [NoiseKind::Internal, NoiseKind::External] {
            let pool = manifest(1, 5, "x");
            let spec = NoiseSpec {
                kind,
                fraction: 0.0,
                seed: 1,
                external_pool: Some(&pool),
            };
            let (noisy, log) = inject_noise(&m, &spec).unwrap();
            assert_eq!(noisy, m);
            assert!(log.replacements.is_empty());
        }
    }

    #[test]
    fn two_class_internal_donors_come_from_other_class() {
        let m = manifest(2, 10, "c");
        let spec = NoiseSpec {
            kind: NoiseKind::Internal,
            fraction: 0.5,
            seed: 3,
            external_pool: None,
        };
        let (noisy, log) = inject_noise(&m, &spec).unwrap();
        assert_eq!(log.replacements.len(), 10);
        let class_of: BTreeMap<&ImageId, &str> = m
            .entries
            .iter()
            .map(|e| (&e.id, e.label.as_str()))
            .collect();
        for r in &log.replacements {
            let donor_class = class_of[&r.substitute_image_id];
            assert_ne!(donor_class, r.class);
            assert_eq!(donor_class, r.substitute_source_label);
        }
        assert_eq!(noisy.per_class_counts(), m.per_class_counts());
        assert!(noisy.check_unique_ids().is_ok());
        let report = audit_noise(&m, &noisy, &log).unwrap();
        assert!(report.counts_exact && report.kind_consistent);
        assert_eq!(apply_inverse(&noisy, &log).unwrap(), m);
    }

    #[test]
    fn internal_requires_two_classes_and_balance() {
        let m = manifest(1, 10, "c");
        let spec = NoiseSpec {
            kind: NoiseKind::Internal,
            fraction: 0.3,
            seed: 3,
            external_pool: None,
        };
        assert_eq!(
            inject_noise(&m, &spec).unwrap_err(),
            NoiseError::SingleClass
        );

        let mut lopsided = manifest(2, 10, "c");
        lopsided.entries.truncate(12); // 10 of c00, 2 of c01
        let spec = NoiseSpec {
            fraction: 0.5,
            ..spec
        };
        assert!(matches!(
            inject_noise(&lopsided, &spec),
            Err(NoiseError::NoDonorAssignment { .. })
        ));
    }

    #[test]
    fn external_checks_pool() {
        let m = manifest(2, 10, "c");
        let spec = NoiseSpec {
            kind: NoiseKind::External,
            fraction: 0.5,
            seed: 1,
            external_pool: None,
        };
        assert_eq!(
            inject_noise(&m, &spec).unwrap_err(),
            NoiseError::MissingExternalPool
        );
        let small = manifest(1, 3, "x");
        let spec = NoiseSpec {
            external_pool: Some(&small),
            ..spec
        };
        assert!(matches!(
            inject_noise(&m, &spec),
            Err(NoiseError::ExternalPoolTooSmall { need: 10, have: 3 })
        ));
        let overlapping = manifest(1, 30, "c");
        let spec = NoiseSpec {
            external_pool: Some(&overlapping),
            ..spec
        };
        assert!(matches!(
            inject_noise(&m, &spec),
            Err(NoiseError::ExternalLabelOverlap(_))
        ));
    }

    #[test]
    fn tampering_fails_the_audit() {
        let m = manifest(4, 20, "c");
        let spec = NoiseSpec {
            kind: NoiseKind::Internal,
            fraction: 0.25,
            seed: 11,
            external_pool: None,
        };
        let (mut noisy, log) = inject_noise(&m, &spec).unwrap();
        // swap the images of two untouched entries of different classes
        let untouched: Vec<usize> = (0..m.entries.len())
            .filter(|i| m.entries[*i] == noisy.entries[*i])
            .collect();
        let a = untouched[0];
        let b = *untouched
            .iter()
            .find(|i| m.entries[**i].label != m.entries[a].label)
            .unwrap();
        let (ea, eb) = (noisy.entries[a].clone(), noisy.entries[b].clone());
        noisy.entries[a] = ManifestEntry {
            label: ea.label.clone(),
            ..eb.clone()
        };
        noisy.entries[b] = ManifestEntry {
            label: eb.label,
            ..ea
        };
        assert!(
            matches!(audit_noise(&m, &noisy, &log), Err(AuditError::Mismatch(p)) if p.len() == 2)
        );
    }

    #[test]
    fn identity_audit() {
        let m = manifest(3, 7, "c");
        let log = ReplacementLog {
            kind: NoiseKind::Internal,
            fraction: 0.0,
            seed: 0,
            replacements: vec![],
        };
        let report = audit_noise(&m, &m, &log).unwrap();
        assert_eq!(report.total_replaced, 0);
        assert!(report.per_class.values().all(|a| a.replaced == 0));
    }

    #[test]
    fn grid_reports_per_cell_errors() {
        let m = manifest(1, 10, "c");
        let cells = noise_grid(&m, &[NoiseKind::Internal], &DEFAULT_FRACTIONS, 5, None);
        assert_eq!(cells.len(), 9);
        assert!(cells.iter().all(|c| c.outcome.is_err()));
        let seeds: BTreeSet<u64> = cells.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 9);
    }
}
