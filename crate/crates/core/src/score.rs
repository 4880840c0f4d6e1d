//! Expansion quality score and top-k selection.
//!
//! `score = d · s · exp(dup / dup_max)`. Lower is better: the expansion sits
//! near the class, is compact, and shares few images with the base query.
//! `dup_max` is the largest duplicate count among the class's expansions.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::ExpansionStats;

/// Expansions kept per class.
pub const DEFAULT_KEEP: usize = 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("distance and dispersion must be finite and non-negative (d={d}, s={s})")]
    Negative { d: f64, s: f64 },
    #[error("duplicate count {dup} exceeds maximum {dup_max}")]
    DupAboveMax { dup: u32, dup_max: u32 },
    #[error("no expansion statistics to rank")]
    Empty,
    #[error("statistics mix classes {0} and {1}")]
    MixedClasses(String, String),
}

pub fn expansion_score(d: f64, s: f64, dup: u32, dup_max: u32) -> Result<f64, ScoreError> {
    if !(d >= 0.0 && s >= 0.0 && d.is_finite() && s.is_finite()) {
        return Err(ScoreError::Negative { d, s });
    }
    if dup_max == 0 {
        return Ok(d * s);
    }
    if dup > dup_max {
        return Err(ScoreError::DupAboveMax { dup, dup_max });
    }
    Ok(d * s * libm::exp(f64::from(dup) / f64::from(dup_max)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExpansion {
    #[serde(flatten)]
    pub stats: ExpansionStats,
    pub dup_max: u32,
    pub score: f64,
}

fn ranking(a: &ScoredExpansion, b: &ScoredExpansion) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.stats.dup.cmp(&b.stats.dup))
        .then_with(|| a.stats.keyword.cmp(&b.stats.keyword))
}

/// Scores every expansion of one class, ascending by (score, dup, keyword).
pub fn score_all(stats: &[ExpansionStats]) -> Result<Vec<ScoredExpansion>, ScoreError> {
    let first = stats.first().ok_or(ScoreError::Empty)?;
    if let Some(other) = stats.iter().find(|s| s.class_id != first.class_id) {
        return Err(ScoreError::MixedClasses(
            first.class_id.clone(),
            other.class_id.clone(),
        ));
    }
    let dup_max = stats.iter().map(|s| s.dup).max().unwrap_or(0);
    let mut scored = stats
        .iter()
        .map(|s| {
            Ok(ScoredExpansion {
                score: expansion_score(s.d, s.s, s.dup, dup_max)?,
                dup_max,
                stats: s.clone(),
            })
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    scored.sort_by(ranking);
    Ok(scored)
}

/// The `keep` lowest-scoring expansions of one class.
pub fn rank_expansions(
    stats: &[ExpansionStats],
    keep: usize,
) -> Result<Vec<ScoredExpansion>, ScoreError> {
    let mut scored = score_all(stats)?;
    if scored.len() < keep {
        log::warn!(
            "class {} has only {} scored expansions, wanted {keep}",
            stats[0].class_id,
            scored.len()
        );
    }
    scored.truncate(keep);
    Ok(scored)
}
