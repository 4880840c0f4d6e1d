//! Geometry of feature-vector sets: centroids, dispersion and the distance
//! between an expansion and its class.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("no vectors given")]
    Empty,
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("vector {index} contains a non-finite value")]
    NonFinite { index: usize },
}

fn check<V: AsRef<[f64]>>(vectors: &[V]) -> Result<usize, StatsError> {
    let dim = vectors.first().ok_or(StatsError::Empty)?.as_ref().len();
    for (index, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(StatsError::DimMismatch {
                index,
                expected: dim,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite { index });
        }
    }
    Ok(dim)
}

/// Per-coordinate arithmetic mean.
pub fn centroid<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>, StatsError> {
    let dim = check(vectors)?;
    let mut sum = vec![0.0; dim];
    for v in vectors {
        for (s, x) in sum.iter_mut().zip(v.as_ref()) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok(sum)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Root-mean-square Euclidean distance of the vectors from their centroid.
pub fn dispersion<V: AsRef<[f64]>>(vectors: &[V]) -> Result<f64, StatsError> {
    let c = centroid(vectors)?;
    Ok(dispersion_about(vectors, &c))
}

fn dispersion_about<V: AsRef<[f64]>>(vectors: &[V], center: &[f64]) -> f64 {
    let total: f64 = vectors
        .iter()
        .map(|v| squared_distance(v.as_ref(), center))
        .sum();
    libm::sqrt(total / vectors.len() as f64)
}

/// Euclidean distance between the centroids of the two sets.
pub fn distance_to_class<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    class_vectors: &[A],
    expansion_vectors: &[B],
) -> Result<f64, StatsError> {
    let a = centroid(class_vectors)?;
    let b = centroid(expansion_vectors)?;
    if a.len() != b.len() {
        return Err(StatsError::DimMismatch {
            index: 0,
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(libm::sqrt(squared_distance(&a, &b)))
}

/// Distance, dispersion and duplicate count of one expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionStats {
    pub class_id: String,
    pub keyword: String,
    /// Distance from the expansion centroid to the class centroid.
    pub d: f64,
    /// RMS spread of the expansion around its own centroid.
    pub s: f64,
    /// Images shared with the base class.
    pub dup: u32,
    pub n_images: usize,
}

impl ExpansionStats {
    /// `class_centroid` comes from the deduplicated base-query images.
    pub fn compute<V: AsRef<[f64]>>(
        class_id: &str,
        keyword: &str,
        class_centroid: &[f64],
        expansion_vectors: &[V],
        dup: u32,
    ) -> Result<Self, StatsError> {
        let c = centroid(expansion_vectors)?;
        if c.len() != class_centroid.len() {
            return Err(StatsError::DimMismatch {
                index: 0,
                expected: class_centroid.len(),
                found: c.len(),
            });
        }
        Ok(Self {
            class_id: class_id.into(),
            keyword: keyword.into(),
            d: libm::sqrt(squared_distance(&c, class_centroid)),
            s: dispersion_about(expansion_vectors, &c),
            dup,
            n_images: expansion_vectors.len(),
        })
    }
}
