//! Vote accumulation: per-pair invariant parameters are scattered into a
//! sparse voxel grid for the part center (each pair constrains the center
//! to a circle) and into Fibonacci-sphere grids for the up/right axes
//! (each pair constrains an axis to a cone about its direction). The
//! extracted frame is converted into a Lie-algebra increment relative to
//! the keyframe's part frame.
//!
//! Vote mass is conserved: every pair deposits exactly its weight, split
//! over its circle or cone samples; out-of-bounds center votes are counted
//! as dropped mass.

use std::collections::HashMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::ppf::PointPair;
use crate::predictor::{InvariantParams, PartFrameTruth};
use crate::se3::{Se3Error, Twist};

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum VotingError {
    #[error("no parameters to aggregate")]
    Empty,
    #[error("ambiguous peak: runner-up holds {ratio:.3} of the peak mass")]
    AmbiguousPeak { ratio: f64 },
    #[error("voted axes are near-parallel; no valid frame")]
    DegenerateOrientation,
    #[error(transparent)]
    Se3(#[from] Se3Error),
}

/// Deterministic Fibonacci lattice of `n` unit directions, ordered by
/// strictly decreasing z.
pub fn fibonacci_directions(n: usize) -> Vec<Vector3<f64>> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden_angle * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Orientation accumulator over a Fibonacci sphere.
#[derive(Debug, Clone)]
pub struct SphereGrid {
    directions: Vec<Vector3<f64>>,
    accumulator: Vec<f64>,
    added: f64,
}

impl SphereGrid {
    pub fn new(n_bins: usize) -> Self {
        assert!(n_bins >= 2);
        Self {
            directions: fibonacci_directions(n_bins),
            accumulator: vec![0.0; n_bins],
            added: 0.0,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.directions.len()
    }

    pub fn directions(&self) -> &[Vector3<f64>] {
        &self.directions
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    pub fn total_mass(&self) -> f64 {
        self.added
    }

    /// Mean angular spacing between neighboring bins, `sqrt(4 pi / n)`.
    pub fn spacing(&self) -> f64 {
        (4.0 * std::f64::consts::PI / self.n_bins() as f64).sqrt()
    }

    /// Conservative covering radius: any direction has a bin within this
    /// angle.
    fn covering(&self) -> f64 {
        2.0 * self.spacing()
    }

    /// Exact nearest bin. The lattice is sorted by z, and any direction
    /// within angle `a` of the query has `|dz| <= a`, so only a z-window
    /// of bins needs scanning.
    pub fn nearest_bin(&self, dir: &Vector3<f64>) -> usize {
        let n = self.n_bins() as f64;
        let window = self.covering();
        // z_i = 1 - (2i + 1)/n  =>  i = ((1 - z) * n - 1) / 2
        let idx_of = |z: f64| ((1.0 - z) * n - 1.0) / 2.0;
        let lo = (idx_of(dir.z + window).floor() as i64 - 1).max(0) as usize;
        let hi = (idx_of(dir.z - window).ceil() as i64 + 1).min(self.n_bins() as i64 - 1) as usize;
        let mut best = lo;
        let mut best_dot = f64::NEG_INFINITY;
        for i in lo..=hi {
            let d = self.directions[i].dot(dir);
            if d > best_dot {
                best_dot = d;
                best = i;
            }
        }
        best
    }

    pub fn add(&mut self, dir: &Vector3<f64>, mass: f64) {
        let bin = self.nearest_bin(dir);
        self.accumulator[bin] += mass;
        self.added += mass;
    }

    /// Peak bin with deterministic tie-breaking by index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.accumulator.len() {
            if self.accumulator[i] > self.accumulator[best] {
                best = i;
            }
        }
        best
    }
}

/// Sparse voxel accumulator for center votes.
#[derive(Debug, Clone)]
pub struct CenterGrid {
    voxel_size: f64,
    min: Vector3<f64>,
    dims: [i64; 3],
    cells: HashMap<(i64, i64, i64), f64>,
    added: f64,
    dropped: f64,
}

impl CenterGrid {
    /// Axis-aligned box of half-width `half_extent` around `center`,
    /// divided into cubic voxels.
    pub fn new(center: Vector3<f64>, half_extent: f64, voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0 && half_extent > 0.0);
        let per_axis = (2.0 * half_extent / voxel_size).ceil() as i64;
        Self {
            voxel_size,
            min: center - Vector3::repeat(half_extent),
            dims: [per_axis; 3],
            cells: HashMap::new(),
            added: 0.0,
            dropped: 0.0,
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn total_mass(&self) -> f64 {
        self.added
    }

    pub fn dropped_mass(&self) -> f64 {
        self.dropped
    }

    fn voxel_of(&self, p: &Vector3<f64>) -> Option<(i64, i64, i64)> {
        let rel = (p - self.min) / self.voxel_size;
        let v = (
            rel.x.floor() as i64,
            rel.y.floor() as i64,
            rel.z.floor() as i64,
        );
        let inside = v.0 >= 0
            && v.0 < self.dims[0]
            && v.1 >= 0
            && v.1 < self.dims[1]
            && v.2 >= 0
            && v.2 < self.dims[2];
        inside.then_some(v)
    }

    pub fn voxel_center(&self, v: (i64, i64, i64)) -> Vector3<f64> {
        self.min
            + Vector3::new(
                (v.0 as f64 + 0.5) * self.voxel_size,
                (v.1 as f64 + 0.5) * self.voxel_size,
                (v.2 as f64 + 0.5) * self.voxel_size,
            )
    }

    pub fn add(&mut self, p: &Vector3<f64>, mass: f64) {
        match self.voxel_of(p) {
            Some(v) => {
                *self.cells.entry(v).or_insert(0.0) += mass;
                self.added += mass;
            }
            None => self.dropped += mass,
        }
    }

    pub fn mass_at(&self, v: (i64, i64, i64)) -> f64 {
        self.cells.get(&v).copied().unwrap_or(0.0)
    }

    /// Cells sorted by descending mass (ties by voxel coordinate), for
    /// deterministic peak extraction.
    fn ranked(&self) -> Vec<((i64, i64, i64), f64)> {
        let mut all: Vec<_> = self.cells.iter().map(|(k, v)| (*k, *v)).collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all
    }
}

/// Orthonormal basis of the plane perpendicular to the unit vector `d`.
fn perp_basis(d: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if d.x.abs() <= 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = d.cross(&helper).normalize();
    let w = d.cross(&u);
    (u, w)
}

/// Scatter center votes: each pair constrains the center to the circle of
/// center `p_i + mu d_hat` and radius `nu` in the plane perpendicular to
/// `d_hat`; the pair's weight is split evenly over `n_circle_samples`
/// sample points.
pub fn vote_center(
    pairs: &[PointPair],
    params: &[InvariantParams],
    cloud: &PointCloud,
    grid: &mut CenterGrid,
    n_circle_samples: usize,
) {
    assert_eq!(pairs.len(), params.len());
    assert!(n_circle_samples >= 1);
    for (pair, param) in pairs.iter().zip(params) {
        let c = cloud.position(pair.i) + pair.d_hat * param.mu;
        let (u, w) = perp_basis(&pair.d_hat);
        let mass = param.weight / n_circle_samples as f64;
        for m in 0..n_circle_samples {
            let phi = 2.0 * std::f64::consts::PI * m as f64 / n_circle_samples as f64;
            let p = c + (u * phi.cos() + w * phi.sin()) * param.nu;
            grid.add(&p, mass);
        }
    }
}

/// Which voted axis a sphere grid accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrientationAxis {
    /// Up axis, constrained by `alpha`.
    Up,
    /// Right axis, constrained by `beta`.
    Right,
}

/// Scatter orientation votes: the constraint `e . d_hat = alpha` puts the
/// axis on a cone of half-angle `acos(alpha)` about `d_hat`; the pair's
/// weight is split evenly over `n_cone_samples` directions on that cone.
pub fn vote_orientation(
    pairs: &[PointPair],
    params: &[InvariantParams],
    grid: &mut SphereGrid,
    axis: OrientationAxis,
    n_cone_samples: usize,
) {
    assert_eq!(pairs.len(), params.len());
    assert!(n_cone_samples >= 1);
    for (pair, param) in pairs.iter().zip(params) {
        let cos_half = match axis {
            OrientationAxis::Up => param.alpha,
            OrientationAxis::Right => param.beta,
        }
        .clamp(-1.0, 1.0);
        let sin_half = (1.0 - cos_half * cos_half).sqrt();
        let (u, w) = perp_basis(&pair.d_hat);
        let mass = param.weight / n_cone_samples as f64;
        for m in 0..n_cone_samples {
            let phi = 2.0 * std::f64::consts::PI * m as f64 / n_cone_samples as f64;
            let dir = pair.d_hat * cos_half + (u * phi.cos() + w * phi.sin()) * sin_half;
            grid.add(&dir, mass);
        }
    }
}

/// Weighted componentwise median of the per-pair scale estimates.
pub fn aggregate_scale(params: &[InvariantParams]) -> Result<Vector3<f64>, VotingError> {
    if params.is_empty() {
        return Err(VotingError::Empty);
    }
    let mut out = Vector3::zeros();
    for axis in 0..3 {
        let mut entries: Vec<(f64, f64)> = params
            .iter()
            .map(|p| (p.gamma[axis], p.weight.max(0.0)))
            .collect();
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let total: f64 = entries.iter().map(|e| e.1).sum();
        let mut acc = 0.0;
        let mut value = entries[entries.len() - 1].0;
        for (v, w) in &entries {
            acc += w;
            if acc >= total / 2.0 {
                value = *v;
                break;
            }
        }
        out[axis] = value;
    }
    Ok(out)
}

/// Recovered part frame plus a vote-quality score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseHypothesis {
    pub center: Vector3<f64>,
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Peak mass normalized by the total accumulated mass.
    pub score: f64,
}

impl PoseHypothesis {
    /// The hypothesis as a part frame (same axis convention as
    /// [`PartFrameTruth`]).
    pub fn frame(&self) -> PartFrameTruth {
        PartFrameTruth {
            center: self.center,
            e1: self.e1,
            e2: self.e2,
            scale: self.scale,
        }
    }

    pub fn pose(&self) -> crate::se3::Pose {
        self.frame().pose()
    }
}

/// Runner-up threshold for ambiguity: a second peak holding at least this
/// fraction of the top mass, far from the top peak, is ambiguous.
const AMBIGUITY_RATIO: f64 = 0.95;

/// Extract the center (argmax voxel refined by the weighted mean of its
/// 3x3x3 neighborhood), the up axis (argmax bin) and the right axis
/// (argmax bin re-orthogonalized against up), and assemble the frame.
pub fn extract_pose(
    center_grid: &CenterGrid,
    e1_grid: &SphereGrid,
    e2_grid: &SphereGrid,
    scale: Vector3<f64>,
) -> Result<PoseHypothesis, VotingError> {
    let ranked = center_grid.ranked();
    if ranked.is_empty() || center_grid.total_mass() <= 0.0 {
        return Err(VotingError::Empty);
    }
    let (peak, peak_mass) = ranked[0];
    // Ambiguity: a rival far peak with nearly the same mass.
    for (v, mass) in ranked.iter().skip(1) {
        if *mass < AMBIGUITY_RATIO * peak_mass {
            break;
        }
        let cheb = (v.0 - peak.0)
            .abs()
            .max((v.1 - peak.1).abs())
            .max((v.2 - peak.2).abs());
        if cheb > 2 {
            return Err(VotingError::AmbiguousPeak {
                ratio: mass / peak_mass,
            });
        }
    }
    let mut weighted = Vector3::zeros();
    let mut total = 0.0;
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                let v = (peak.0 + dx, peak.1 + dy, peak.2 + dz);
                let m = center_grid.mass_at(v);
                weighted += center_grid.voxel_center(v) * m;
                total += m;
            }
        }
    }
    let center = weighted / total;

    let e1 = sphere_peak(e1_grid)?;
    let e2_raw = sphere_peak(e2_grid)?;
    let e2_tangent = e2_raw - e1 * e2_raw.dot(&e1);
    let norm = e2_tangent.norm();
    if norm < 1e-6 {
        return Err(VotingError::DegenerateOrientation);
    }
    let e2 = e2_tangent / norm;

    Ok(PoseHypothesis {
        center,
        e1,
        e2,
        scale,
        score: peak_mass / center_grid.total_mass(),
    })
}

fn sphere_peak(grid: &SphereGrid) -> Result<Vector3<f64>, VotingError> {
    if grid.total_mass() <= 0.0 {
        return Err(VotingError::Empty);
    }
    let best = grid.argmax();
    let best_mass = grid.accumulator()[best];
    let best_dir = grid.directions()[best];
    let far = (2.0 * grid.spacing()).cos();
    for i in 0..grid.n_bins() {
        if i == best {
            continue;
        }
        let mass = grid.accumulator()[i];
        if mass >= AMBIGUITY_RATIO * best_mass && grid.directions()[i].dot(&best_dir) < far {
            return Err(VotingError::AmbiguousPeak {
                ratio: mass / best_mass,
            });
        }
    }
    Ok(best_dir)
}

/// Lie-algebra increment of the recovered frame relative to the part's
/// frame at the keyframe: `log(pose(hyp) * pose(keyframe_frame)^-1)`.
pub fn hypothesis_to_increment(
    hyp: &PoseHypothesis,
    keyframe_frame: &PartFrameTruth,
) -> Result<Twist, VotingError> {
    Ok(hyp.pose().compose(&keyframe_frame.pose().inverse()).log()?)
}
