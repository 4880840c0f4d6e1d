//! Principal component projection for visualizing feature distributions.
//!
//! The eigendecomposition runs on whichever of the covariance (`dim × dim`)
//! or Gram (`n × n`) matrix is smaller; both share their non-zero spectrum.
//! Each component is oriented so its largest-magnitude entry is positive.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::stats::{centroid, StatsError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PcaError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("output dimension {out_dim} must be in 1..={dim}")]
    OutDim { out_dim: usize, dim: usize },
    #[error("need more than {out_dim} vectors, got {n}")]
    TooFewSamples { n: usize, out_dim: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Orthonormal basis, one row per component.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Projected coordinates, one row per input vector.
    pub points: Vec<Vec<f64>>,
    /// All inputs were identical; every point projects to the origin.
    pub degenerate: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = libm::sqrt(dot(v, v));
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if libm::fabs(*x) > libm::fabs(v[best]) {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Extends `basis` with unit vectors orthogonal to everything already in it.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, wanted: usize) {
    let mut axis = 0;
    while basis.len() < wanted && axis < dim {
        let mut candidate = vec![0.0; dim];
        candidate[axis] = 1.0;
        axis += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let p = dot(&candidate, b);
                for (c, x) in candidate.iter_mut().zip(b) {
                    *c -= p * x;
                }
            }
        }
        if normalize(&mut candidate) > 1e-6 {
            basis.push(candidate);
        }
    }
}

/// Eigenpairs sorted by decreasing eigenvalue.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            (
                l.max(0.0),
                eig.eigenvectors.column(i).iter().copied().collect(),
            )
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

pub fn pca_project<V: AsRef<[f64]>>(vectors: &[V], out_dim: usize) -> Result<Projection, PcaError> {
    let mean = centroid(vectors)?;
    let dim = mean.len();
    let n = vectors.len();
    if out_dim == 0 || out_dim > dim {
        return Err(PcaError::OutDim { out_dim, dim });
    }
    if n <= out_dim {
        return Err(PcaError::TooFewSamples { n, out_dim });
    }

    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.as_ref().iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let denom = (n - 1) as f64;
    let total_variance: f64 = centered.iter().map(|c| dot(c, c)).sum::<f64>() / denom;
    let x = DMatrix::from_fn(n, dim, |i, j| centered[i][j]);

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut variances: Vec<f64> = Vec::with_capacity(out_dim);
    if total_variance > 0.0 {
        if dim <= n {
            let cov = (x.transpose() * &x) / denom;
            for (l, v) in sorted_eigen(cov).into_iter().take(out_dim) {
                components.push(v);
                variances.push(l);
            }
        } else {
            let gram = (&x * x.transpose()) / denom;
            let pairs = sorted_eigen(gram);
            let floor = pairs[0].0 * 1e-12;
            for (l, u) in pairs.into_iter().take(out_dim) {
                if l <= floor {
                    break;
                }
                let mut v: Vec<f64> = (0..dim)
                    .map(|j| (0..n).map(|i| centered[i][j] * u[i]).sum())
                    .collect();
                normalize(&mut v);
                components.push(v);
                variances.push(l);
            }
        }
    } else {
        log::warn!("all {n} vectors are identical; projection is zero");
    }
    let found = components.len();
    complete_basis(&mut components, dim, out_dim);
    variances.resize(found.max(components.len()), 0.0);
    for c in &mut components {
        orient(c);
    }

    let ratio = variances
        .iter()
        .map(|v| {
            if total_variance > 0.0 {
                v / total_variance
            } else {
                0.0
            }
        })
        .collect();
    let points = centered
        .iter()
        .map(|c| components.iter().map(|b| dot(c, b)).collect())
        .collect();
    Ok(Projection {
        mean,
        components,
        explained_variance: variances,
        explained_variance_ratio: ratio,
        points,
        degenerate: total_variance == 0.0,
    })
}
