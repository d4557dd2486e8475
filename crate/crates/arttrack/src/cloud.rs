//! Point-cloud container, normal estimation, farthest-point downsampling
//! and the set distances (Chamfer, Hausdorff) feeding the keyframe energy.
//!
//! Clouds are stored as parallel arrays of positions, unit normals and
//! part labels, with optional canonical-point correspondence indices for
//! synthetic data. Nearest-neighbor queries go through a uniform voxel
//! grid ([`GridIndex`]) whose results are exact (verified against the
//! brute-force path in tests).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::se3::Pose;
use crate::seed;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("cloud has {got} points but the operation needs at least {need}")]
    TooFewPoints { need: usize, got: usize },
    #[error("empty cloud")]
    EmptyCloud,
    #[error("parallel arrays have mismatched lengths")]
    LengthMismatch,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Oriented, part-labelled point cloud. Positions in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    part_labels: Vec<usize>,
    /// Index of the canonical model point each point was sampled from,
    /// when known (synthetic data). Kept through transforms and subsets.
    canon_indices: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        part_labels: Vec<usize>,
    ) -> Result<Self, CloudError> {
        if positions.len() != normals.len() || positions.len() != part_labels.len() {
            return Err(CloudError::LengthMismatch);
        }
        Ok(Self {
            positions,
            normals,
            part_labels,
            canon_indices: None,
        })
    }

    pub fn with_canon_indices(mut self, indices: Vec<usize>) -> Result<Self, CloudError> {
        if indices.len() != self.positions.len() {
            return Err(CloudError::LengthMismatch);
        }
        self.canon_indices = Some(indices);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn part_labels(&self) -> &[usize] {
        &self.part_labels
    }

    pub fn canon_indices(&self) -> Option<&[usize]> {
        self.canon_indices.as_deref()
    }

    pub fn position(&self, i: usize) -> &Vector3<f64> {
        &self.positions[i]
    }

    pub fn normal(&self, i: usize) -> &Vector3<f64> {
        &self.normals[i]
    }

    /// Indices of the points labelled with `part`.
    pub fn part_point_indices(&self, part: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.part_labels[i] == part)
            .collect()
    }

    /// New cloud with the selected points, preserving label and
    /// correspondence data.
    pub fn subset(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            part_labels: indices.iter().map(|&i| self.part_labels[i]).collect(),
            canon_indices: self
                .canon_indices
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Rigidly transformed copy: positions by `R x + t`, normals by `R n`.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            positions: self.positions.iter().map(|p| pose.apply(p)).collect(),
            normals: self.normals.iter().map(|n| pose.rotate(n)).collect(),
            part_labels: self.part_labels.clone(),
            canon_indices: self.canon_indices.clone(),
        }
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut sum = Vector3::zeros();
        for p in &self.positions {
            sum += p;
        }
        sum / self.len().max(1) as f64
    }

    /// Concatenate clouds; correspondence indices survive only if every
    /// piece carries them.
    pub fn concat(clouds: &[&PointCloud]) -> PointCloud {
        let mut positions = Vec::new();
        let mut normals = Vec::new();
        let mut part_labels = Vec::new();
        let all_corr = clouds.iter().all(|c| c.canon_indices.is_some());
        let mut canon = all_corr.then(Vec::new);
        for c in clouds {
            positions.extend_from_slice(&c.positions);
            normals.extend_from_slice(&c.normals);
            part_labels.extend_from_slice(&c.part_labels);
            if let (Some(acc), Some(src)) = (canon.as_mut(), c.canon_indices.as_ref()) {
                acc.extend_from_slice(src);
            }
        }
        PointCloud {
            positions,
            normals,
            part_labels,
            canon_indices: canon,
        }
    }

    /// Per-point normals from the k-nearest-neighbor covariance (smallest
    /// eigenvector), oriented so that `n . (viewpoint - p) >= 0`.
    pub fn estimate_normals(
        &self,
        k_neighbors: usize,
        viewpoint: &Vector3<f64>,
    ) -> Result<PointCloud, CloudError> {
        if self.len() < k_neighbors {
            return Err(CloudError::TooFewPoints {
                need: k_neighbors,
                got: self.len(),
            });
        }
        let index = GridIndex::build(&self.positions);
        let mut normals = Vec::with_capacity(self.len());
        for (i, p) in self.positions.iter().enumerate() {
            let neigh = index.k_nearest(p, k_neighbors);
            let mut mean = Vector3::zeros();
            for &j in &neigh {
                mean += self.positions[j];
            }
            mean /= neigh.len() as f64;
            let mut cov = nalgebra::Matrix3::zeros();
            for &j in &neigh {
                let d = self.positions[j] - mean;
                cov += d * d.transpose();
            }
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut min_idx = 0;
            for c in 1..3 {
                if eig.eigenvalues[c] < eig.eigenvalues[min_idx] {
                    min_idx = c;
                }
            }
            let mut n = eig.eigenvectors.column(min_idx).into_owned();
            let norm = n.norm();
            if norm > 0.0 {
                n /= norm;
            } else {
                n = Vector3::z();
            }
            if n.dot(&(viewpoint - self.positions[i])) < 0.0 {
                n = -n;
            }
            normals.push(n);
        }
        Ok(PointCloud {
            positions: self.positions.clone(),
            normals,
            part_labels: self.part_labels.clone(),
            canon_indices: self.canon_indices.clone(),
        })
    }

    /// Farthest-point sampling down to `n_target` points (identity when the
    /// cloud is already small enough). The seed picks the starting point.
    pub fn downsample(&self, n_target: usize, seed_value: u64) -> PointCloud {
        assert!(n_target >= 1, "n_target must be at least 1");
        if self.len() <= n_target {
            return self.clone();
        }
        let selected = farthest_point_indices(&self.positions, n_target, seed_value);
        self.subset(&selected)
    }
}

fn farthest_point_indices(points: &[Vector3<f64>], n_target: usize, seed_value: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = seed::rng(seed_value, &[0x46_50_53]);
    let start = rng.random_range(0..points.len());
    let mut selected = Vec::with_capacity(n_target);
    let mut best_d2 = vec![f64::INFINITY; points.len()];
    let mut current = start;
    selected.push(start);
    while selected.len() < n_target {
        let cp = points[current];
        let mut far_idx = 0;
        let mut far_d2 = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - cp).norm_squared();
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
            // Ties broken by the lower index so the result is stable.
            if best_d2[i] > far_d2 {
                far_d2 = best_d2[i];
                far_idx = i;
            }
        }
        if far_d2 <= 0.0 {
            break; // all remaining points coincide with selected ones
        }
        selected.push(far_idx);
        current = far_idx;
        best_d2[far_idx] = 0.0;
    }
    selected
}

/// Symmetric Chamfer distance: `mean_a min_b |a-b| + mean_b min_a |a-b|`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, CloudError> {
    if a.is_empty() || b.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    let (mean_ab, _) = directed_stats(&a.positions, &b.positions);
    let (mean_ba, _) = directed_stats(&b.positions, &a.positions);
    Ok(mean_ab + mean_ba)
}

/// Symmetric Hausdorff distance: max of the two directed max-min distances.
pub fn hausdorff(a: &PointCloud, b: &PointCloud) -> Result<f64, CloudError> {
    if a.is_empty() || b.is_empty() {
        return Err(CloudError::EmptyCloud);
    }
    let (_, max_ab) = directed_stats(&a.positions, &b.positions);
    let (_, max_ba) = directed_stats(&b.positions, &a.positions);
    Ok(max_ab.max(max_ba))
}

/// (mean, max) of nearest-neighbor distances from each point of `from`
/// into `to`.
fn directed_stats(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> (f64, f64) {
    let index = GridIndex::build(to);
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for p in from {
        let (_, d2) = index.nearest(p);
        let d = d2.sqrt();
        sum += d;
        max = max.max(d);
    }
    (sum / from.len() as f64, max)
}

/// Uniform voxel hash for exact nearest-neighbor queries.
///
/// Cells are scanned in expanding Chebyshev shells; the search stops once
/// the best squared distance is within `(r * cell)^2`, which bounds the
/// distance to any point in an unvisited shell.
pub struct GridIndex {
    cell: f64,
    origin: Vector3<f64>,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
    points: Vec<Vector3<f64>>,
    max_coord: (i64, i64, i64),
}

impl GridIndex {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        assert!(!points.is_empty(), "GridIndex needs at least one point");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let diag = (hi - lo).norm().max(1e-9);
        // Aim for a handful of points per cell.
        let cell = (diag / (points.len() as f64).cbrt().max(1.0)).max(1e-9);
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        let mut max_coord = (0, 0, 0);
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p, &lo, cell);
            max_coord.0 = max_coord.0.max(c.0);
            max_coord.1 = max_coord.1.max(c.1);
            max_coord.2 = max_coord.2.max(c.2);
            cells.entry(c).or_default().push(i);
        }
        Self {
            cell,
            origin: lo,
            cells,
            points: points.to_vec(),
            max_coord,
        }
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let c = self.clamped_cell(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_shell = self.worst_case_shells(&c);
        for r in 0..=max_shell {
            self.scan_shell(&c, r, q, &mut best);
            if best.1.is_finite() {
                let safe = r as f64 * self.cell;
                if best.1 <= safe * safe {
                    break;
                }
            }
        }
        best
    }

    /// Indices of the k nearest points, ordered by distance (ties by
    /// index).
    pub fn k_nearest(&self, q: &Vector3<f64>, k: usize) -> Vec<usize> {
        let k = k.min(self.points.len());
        let c = self.clamped_cell(q);
        let mut found: Vec<(f64, usize)> = Vec::new();
        let max_shell = self.worst_case_shells(&c);
        for r in 0..=max_shell {
            self.collect_shell(&c, r, q, &mut found);
            if found.len() >= k {
                found.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let kth = found[k - 1].0;
                let safe = r as f64 * self.cell;
                if kth <= safe * safe {
                    break;
                }
            }
        }
        found.sort_by(|a, b| a.partial_cmp(b).unwrap());
        found.truncate(k);
        found.into_iter().map(|(_, i)| i).collect()
    }

    /// Query cell clamped into the occupied grid range. Shells expand from
    /// here; a point whose cell is at Chebyshev shell distance > r from the
    /// clamped cell is at least `r * cell` away from the query, whether or
    /// not the query lies inside the grid, so the stop bound stays valid
    /// and the shell count stays bounded by the grid dimensions.
    fn clamped_cell(&self, q: &Vector3<f64>) -> (i64, i64, i64) {
        let c = cell_of(q, &self.origin, self.cell);
        (
            c.0.clamp(0, self.max_coord.0),
            c.1.clamp(0, self.max_coord.1),
            c.2.clamp(0, self.max_coord.2),
        )
    }

    fn worst_case_shells(&self, c: &(i64, i64, i64)) -> i64 {
        let dx = c.0.abs().max((self.max_coord.0 - c.0).abs());
        let dy = c.1.abs().max((self.max_coord.1 - c.1).abs());
        let dz = c.2.abs().max((self.max_coord.2 - c.2).abs());
        dx.max(dy).max(dz) + 1
    }

    fn scan_shell(&self, c: &(i64, i64, i64), r: i64, q: &Vector3<f64>, best: &mut (usize, f64)) {
        self.for_shell_cells(c, r, |pts| {
            for &i in pts {
                let d2 = (self.points[i] - q).norm_squared();
                if d2 < best.1 || (d2 == best.1 && i < best.0) {
                    *best = (i, d2);
                }
            }
        });
    }

    fn collect_shell(
        &self,
        c: &(i64, i64, i64),
        r: i64,
        q: &Vector3<f64>,
        out: &mut Vec<(f64, usize)>,
    ) {
        self.for_shell_cells(c, r, |pts| {
            for &i in pts {
                out.push(((self.points[i] - q).norm_squared(), i));
            }
        });
    }

    fn for_shell_cells(&self, c: &(i64, i64, i64), r: i64, mut f: impl FnMut(&[usize])) {
        if r == 0 {
            if let Some(pts) = self.cells.get(c) {
                f(pts);
            }
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    if let Some(pts) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        f(pts);
                    }
                }
            }
        }
    }
}

fn cell_of(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
    (
        ((p.x - origin.x) / cell).floor() as i64,
        ((p.y - origin.y) / cell).floor() as i64,
        ((p.z - origin.z) / cell).floor() as i64,
    )
}

/// Read a frame file: one `x y z nx ny nz part_id` record per line,
/// whitespace-separated, `#` starts a comment.
pub fn read_frame_file(path: &Path) -> Result<PointCloud, CloudError> {
    let text = std::fs::read_to_string(path)?;
    let mut positions = Vec::new();
    let mut normals = Vec::new();
    let mut labels = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(CloudError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, CloudError> {
            s.parse().map_err(|_| CloudError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad number `{s}`"),
            })
        };
        positions.push(Vector3::new(
            parse(fields[0])?,
            parse(fields[1])?,
            parse(fields[2])?,
        ));
        normals.push(Vector3::new(
            parse(fields[3])?,
            parse(fields[4])?,
            parse(fields[5])?,
        ));
        labels.push(fields[6].parse().map_err(|_| CloudError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad part id `{}`", fields[6]),
        })?);
    }
    PointCloud::new(positions, normals, labels)
}

/// Write a cloud in the frame file format. Floats use Rust's shortest
/// round-trip formatting, so write/read is lossless.
pub fn write_frame_file(path: &Path, cloud: &PointCloud) -> Result<(), CloudError> {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        let n = cloud.normal(i);
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            p.x, p.y, p.z, n.x, n.y, n.z, cloud.part_labels[i]
        )
        .expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Correspondence sidecar: one canonical index per line, aligned with the
/// frame file.
pub fn read_corr_file(path: &Path) -> Result<Vec<usize>, CloudError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|_| CloudError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("bad index `{line}`"),
        })?);
    }
    Ok(out)
}

pub fn write_corr_file(path: &Path, indices: &[usize]) -> Result<(), CloudError> {
    let mut out = String::new();
    for i in indices {
        writeln!(out, "{i}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use rand::Rng;

    fn random_cloud(n: usize, seed_value: u64) -> PointCloud {
        let mut rng = seed::rng(seed_value, &[]);
        let positions = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let normals = vec![Vector3::z(); n];
        PointCloud::new(positions, normals, vec![0; n]).unwrap()
    }

    fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d2 = (p - q).norm_squared();
            if d2 < best.1 {
                best = (i, d2);
            }
        }
        best
    }

    #[test]
    fn grid_index_matches_brute_force() {
        let cloud = random_cloud(500, 1);
        let index = GridIndex::build(cloud.positions());
        let mut rng = seed::rng(2, &[]);
        for _ in 0..300 {
            let q = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            let (gi, gd) = index.nearest(&q);
            let (bi, bd) = brute_nearest(cloud.positions(), &q);
            assert_eq!(gi, bi);
            assert!((gd - bd).abs() < 1e-15);
        }
    }

    #[test]
    fn chamfer_of_cloud_with_itself_is_zero() {
        let cloud = random_cloud(60, 3);
        assert_eq!(chamfer(&cloud, &cloud).unwrap(), 0.0);
        assert_eq!(hausdorff(&cloud, &cloud).unwrap(), 0.0);
    }

    #[test]
    fn two_single_points_give_definitional_values() {
        let a = PointCloud::new(vec![Vector3::zeros()], vec![Vector3::z()], vec![0]).unwrap();
        let b = PointCloud::new(
            vec![Vector3::new(0.7, 0.0, 0.0)],
            vec![Vector3::z()],
            vec![0],
        )
        .unwrap();
        assert!((chamfer(&a, &b).unwrap() - 1.4).abs() < 1e-15);
        assert!((hausdorff(&a, &b).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn distances_match_brute_force_oracle() {
        let a = random_cloud(50, 4);
        let b = random_cloud(50, 5);
        // Exhaustive O(n^2) oracle.
        let directed = |x: &PointCloud, y: &PointCloud| {
            let mut sum = 0.0;
            let mut max = 0.0f64;
            for p in x.positions() {
                let mut best = f64::INFINITY;
                for q in y.positions() {
                    best = best.min((p - q).norm());
                }
                sum += best;
                max = max.max(best);
            }
            (sum / x.len() as f64, max)
        };
        let (m_ab, h_ab) = directed(&a, &b);
        let (m_ba, h_ba) = directed(&b, &a);
        assert!((chamfer(&a, &b).unwrap() - (m_ab + m_ba)).abs() < 1e-12);
        assert!((hausdorff(&a, &b).unwrap() - h_ab.max(h_ba)).abs() < 1e-12);
    }

    #[test]
    fn distances_are_symmetric_and_rigid_invariant() {
        let a = random_cloud(40, 6);
        let b = random_cloud(35, 7);
        assert!((chamfer(&a, &b).unwrap() - chamfer(&b, &a).unwrap()).abs() < 1e-12);
        assert!((hausdorff(&a, &b).unwrap() - hausdorff(&b, &a).unwrap()).abs() < 1e-12);

        let t = Pose::exp(&Twist::new(
            Vector3::new(0.4, -0.2, 0.9),
            Vector3::new(0.3, 0.1, -0.5),
        ));
        let ta = a.transformed(&t);
        let tb = b.transformed(&t);
        assert!((chamfer(&a, &b).unwrap() - chamfer(&ta, &tb).unwrap()).abs() < 1e-9);
        assert!((hausdorff(&a, &b).unwrap() - hausdorff(&ta, &tb).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn empty_cloud_is_an_error() {
        let a = random_cloud(5, 8);
        let empty = PointCloud::new(vec![], vec![], vec![]).unwrap();
        assert!(matches!(chamfer(&a, &empty), Err(CloudError::EmptyCloud)));
        assert!(matches!(hausdorff(&empty, &a), Err(CloudError::EmptyCloud)));
    }

    #[test]
    fn normals_on_a_plane_point_at_the_viewpoint() {
        let mut rng = seed::rng(9, &[]);
        let positions: Vec<_> = (0..200)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                )
            })
            .collect();
        let n = positions.len();
        let cloud = PointCloud::new(positions, vec![Vector3::zeros(); n], vec![0; n]).unwrap();
        let est = cloud
            .estimate_normals(16, &Vector3::new(0.0, 0.0, 1.0))
            .unwrap();
        for n in est.normals() {
            assert!((n - Vector3::z()).norm() < 1e-6, "normal {n:?}");
        }
    }

    #[test]
    fn normals_on_a_sphere_are_radial() {
        let mut rng = seed::rng(10, &[]);
        let positions: Vec<_> = (0..2000)
            .map(|_| loop {
                let v = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let norm = v.norm();
                if norm > 1e-3 && norm <= 1.0 {
                    break v / norm;
                }
            })
            .collect();
        let n = positions.len();
        let cloud = PointCloud::new(positions, vec![Vector3::zeros(); n], vec![0; n]).unwrap();
        let viewpoint = Vector3::new(0.0, 0.0, 5.0);
        let est = cloud.estimate_normals(16, &viewpoint).unwrap();
        // Visible hemisphere: compare with analytic outward normals.
        let mut checked = 0;
        for i in 0..est.len() {
            let p = est.position(i);
            if p.z < 0.3 {
                continue;
            }
            let analytic = p.normalize();
            let angle = est.normal(i).dot(&analytic).clamp(-1.0, 1.0).acos();
            assert!(
                angle < 5.0_f64.to_radians(),
                "angular error {:.2} deg",
                angle.to_degrees()
            );
            checked += 1;
        }
        assert!(checked > 200);
    }

    #[test]
    fn normals_error_on_too_few_points() {
        let cloud = random_cloud(3, 11);
        assert!(matches!(
            cloud.estimate_normals(16, &Vector3::zeros()),
            Err(CloudError::TooFewPoints { need: 16, got: 3 })
        ));
    }

    #[test]
    fn normal_estimation_is_translation_invariant() {
        let cloud = random_cloud(300, 12);
        let viewpoint = Vector3::new(0.0, 0.0, 4.0);
        let est = cloud.estimate_normals(12, &viewpoint).unwrap();
        let shift = Vector3::new(10.0, -3.0, 2.0);
        let moved = cloud.transformed(&Pose::from_translation(shift));
        let est_moved = moved.estimate_normals(12, &(viewpoint + shift)).unwrap();
        for i in 0..est.len() {
            assert!((est.normal(i) - est_moved.normal(i)).amax() < 1e-9);
            assert!((est.normal(i).norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_hits_target_count() {
        let cloud = random_cloud(10_000, 13);
        let down = cloud.downsample(3072, 0);
        assert_eq!(down.len(), 3072);
        // Already small enough: identity.
        let same = down.downsample(5000, 0);
        assert_eq!(same, down);
    }

    #[test]
    fn fps_matches_brute_force_oracle_on_a_line() {
        // 10 collinear points; after the seeded start, FPS must take the
        // endpoints first.
        let positions: Vec<_> = (0..10)
            .map(|i| Vector3::new(i as f64 * 0.1, 0.0, 0.0))
            .collect();
        let n = positions.len();
        let cloud = PointCloud::new(positions.clone(), vec![Vector3::z(); n], vec![0; n]).unwrap();
        let selected = farthest_point_indices(cloud.positions(), 3, 42);

        // Brute-force oracle seeded with the same start point.
        let start = selected[0];
        let mut oracle = vec![start];
        while oracle.len() < 3 {
            let mut best = (0usize, -1.0);
            for (i, p) in positions.iter().enumerate() {
                let d = oracle
                    .iter()
                    .map(|&s| (positions[s] - p).norm())
                    .fold(f64::INFINITY, f64::min);
                if d > best.1 {
                    best = (i, d);
                }
            }
            oracle.push(best.0);
        }
        assert_eq!(selected, oracle);
        // Both segment endpoints are picked within the first three.
        assert!(selected.contains(&0) && selected.contains(&9));
    }

    #[test]
    fn fps_is_deterministic_per_seed() {
        let cloud = random_cloud(500, 14);
        assert_eq!(cloud.downsample(64, 7), cloud.downsample(64, 7));
        assert_ne!(cloud.downsample(64, 7), cloud.downsample(64, 8));
    }

    #[test]
    fn frame_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.txt");
        let cloud = random_cloud(50, 15);
        write_frame_file(&path, &cloud).unwrap();
        let back = read_frame_file(&path).unwrap();
        assert_eq!(cloud.positions(), back.positions());
        assert_eq!(cloud.normals(), back.normals());
        assert_eq!(cloud.part_labels(), back.part_labels());
    }

    #[test]
    fn frame_file_accepts_comments_and_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.txt");
        std::fs::write(&path, "# header\n0 0 0 0 0 1 0 # inline\n\n").unwrap();
        let cloud = read_frame_file(&path).unwrap();
        assert_eq!(cloud.len(), 1);

        std::fs::write(&path, "0 0 0 0 0 1\n").unwrap();
        assert!(matches!(
            read_frame_file(&path),
            Err(CloudError::Parse { line: 1, .. })
        ));
    }
}
