//! Weighted point-pair sampling and SE(3)-invariant pair features.
//!
//! A pair of oriented points carries a unit direction `d_hat` from point i
//! to point j and a weight `1 - lambda * |cos theta_ij|` that discounts
//! pairs with near-parallel normals. The classical four-component pair
//! feature (distance plus three angles) is invariant under any rigid
//! transform of the source cloud.

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::seed;

/// Default weighting strength for near-parallel normals.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Pairs closer than this are degenerate: the direction is undefined.
const MIN_PAIR_DISTANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum PpfError {
    #[error("cloud has {got} points; pair sampling needs at least 2")]
    TooFewPoints { got: usize },
    #[error("degenerate pair: points {i} and {j} coincide")]
    DegeneratePair { i: usize, j: usize },
}

/// An ordered sampled point pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub i: usize,
    pub j: usize,
    /// Unit vector from point i to point j.
    pub d_hat: Vector3<f64>,
    /// Normal-angle weight in `[1 - lambda, 1]`.
    pub weight: f64,
}

/// Four-component pair feature:
/// `(|p_i - p_j|, angle(n_i, d), angle(n_j, d), angle(n_i, n_j))`,
/// distance in meters, angles in `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeature {
    pub distance: f64,
    pub angle_ni_d: f64,
    pub angle_nj_d: f64,
    pub angle_ni_nj: f64,
}

impl PairFeature {
    pub fn as_array(&self) -> [f64; 4] {
        [
            self.distance,
            self.angle_ni_d,
            self.angle_nj_d,
            self.angle_ni_nj,
        ]
    }
}

/// Weight for a pair of unit normals: `1 - lambda * |cos theta_ij|`.
/// Maximal (1.0) for perpendicular normals, minimal (`1 - lambda`) for
/// parallel or anti-parallel ones.
pub fn pair_weight(n_i: &Vector3<f64>, n_j: &Vector3<f64>, lambda: f64) -> f64 {
    1.0 - lambda * n_i.dot(n_j).clamp(-1.0, 1.0).abs()
}

/// Uniformly sample `n_pairs` ordered index pairs (i != j) with
/// replacement, deterministic per seed. Coincident-point pairs are
/// rejected and redrawn. Weights follow [`pair_weight`] with the given
/// lambda.
pub fn sample_pairs(
    cloud: &PointCloud,
    n_pairs: usize,
    lambda: f64,
    seed_value: u64,
) -> Result<Vec<PointPair>, PpfError> {
    if cloud.len() < 2 {
        return Err(PpfError::TooFewPoints { got: cloud.len() });
    }
    let mut rng = seed::rng(seed_value, &[0x70_61_69_72]);
    let n = cloud.len();
    let mut out = Vec::with_capacity(n_pairs);
    let mut rejected = 0usize;
    while out.len() < n_pairs {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let delta = cloud.position(j) - cloud.position(i);
        let dist = delta.norm();
        if dist < MIN_PAIR_DISTANCE {
            rejected += 1;
            if rejected > 100 * n_pairs.max(16) {
                return Err(PpfError::DegeneratePair { i, j });
            }
            continue;
        }
        out.push(PointPair {
            i,
            j,
            d_hat: delta / dist,
            weight: pair_weight(cloud.normal(i), cloud.normal(j), lambda),
        });
    }
    Ok(out)
}

/// The SE(3)-invariant feature of a pair.
pub fn pair_feature(cloud: &PointCloud, pair: &PointPair) -> Result<PairFeature, PpfError> {
    let delta = cloud.position(pair.j) - cloud.position(pair.i);
    let distance = delta.norm();
    if distance < MIN_PAIR_DISTANCE {
        return Err(PpfError::DegeneratePair {
            i: pair.i,
            j: pair.j,
        });
    }
    let d = delta / distance;
    let angle = |a: &Vector3<f64>, b: &Vector3<f64>| a.dot(b).clamp(-1.0, 1.0).acos();
    Ok(PairFeature {
        distance,
        angle_ni_d: angle(cloud.normal(pair.i), &d),
        angle_nj_d: angle(cloud.normal(pair.j), &d),
        angle_ni_nj: angle(cloud.normal(pair.i), cloud.normal(pair.j)),
    })
}
