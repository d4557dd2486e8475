//! Kinematic-constraint refinement: damped Gauss-Newton over per-part
//! tangent-space updates, minimizing `E_comp = E_geo + E_kin`.
//!
//! The geometric term aligns each part's back-transformed observed points
//! with their canonical counterparts (mean squared residual per part).
//! The kinematic term couples connected parts: for a revolute joint both
//! part transforms must map the shared axis point to the same place; for
//! a prismatic joint an axis point is not fixed under sliding, so the
//! residual preserves the axis direction instead.
//!
//! Correspondences come either from canonical indices carried by the
//! observed cloud (synthetic data) or from nearest-neighbor assignment
//! refreshed over a few rounds, which makes the refinement a local one
//! like any ICP-style polish.

use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

use crate::cloud::{GridIndex, PointCloud};
use crate::model::{ArticulatedModel, JointType};
use crate::se3::{Pose, Twist};

#[derive(Debug, Error)]
pub enum KinoptError {
    #[error("observed cloud carries no canonical correspondence indices")]
    MissingCorrespondence,
    #[error("got {got} poses for a model with {expected} parts")]
    PartCountMismatch { got: usize, expected: usize },
}

/// How observed points are matched to canonical model points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correspondence {
    /// Use the canonical indices stored in the observed cloud.
    Exact,
    /// Assign each observed point to its nearest canonical point under
    /// the current poses, refreshed `rounds` times.
    Nearest { rounds: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop when the energy improves by less than this.
    pub energy_tolerance: f64,
    /// Stop when the accepted step is shorter than this.
    pub step_tolerance: f64,
    pub correspondence: Correspondence,
    pub geo_weight: f64,
    pub kin_weight: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            energy_tolerance: 1e-10,
            step_tolerance: 1e-8,
            correspondence: Correspondence::Nearest { rounds: 3 },
            geo_weight: 1.0,
            kin_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeReport {
    pub energy_before: f64,
    pub energy_after: f64,
    pub iterations: usize,
    /// False when no step reduced the energy and the input was returned
    /// unchanged.
    pub improved: bool,
}

/// Per-part observed points and their canonical targets.
struct PartCorrespondence {
    observed: Vec<Vector3<f64>>,
    targets: Vec<Vector3<f64>>,
}

struct GeoProblem {
    parts: Vec<PartCorrespondence>,
}

impl GeoProblem {
    fn from_exact(observed: &PointCloud, model: &ArticulatedModel) -> Result<Self, KinoptError> {
        let canon = observed
            .canon_indices()
            .ok_or(KinoptError::MissingCorrespondence)?;
        let mut parts: Vec<PartCorrespondence> = (0..model.num_parts())
            .map(|_| PartCorrespondence {
                observed: Vec::new(),
                targets: Vec::new(),
            })
            .collect();
        for i in 0..observed.len() {
            let k = observed.part_labels()[i];
            let target = model.parts[k].canonical_cloud.position(canon[i]);
            parts[k].observed.push(*observed.position(i));
            parts[k].targets.push(*target);
        }
        Ok(Self { parts })
    }

    /// Nearest-neighbor assignment in canonical space under the current
    /// poses. Local by construction: a bad pose yields bad matches.
    fn from_nearest(observed: &PointCloud, model: &ArticulatedModel, poses: &[Pose]) -> Self {
        let indexes: Vec<GridIndex> = model
            .parts
            .iter()
            .map(|p| GridIndex::build(p.canonical_cloud.positions()))
            .collect();
        let mut parts: Vec<PartCorrespondence> = (0..model.num_parts())
            .map(|_| PartCorrespondence {
                observed: Vec::new(),
                targets: Vec::new(),
            })
            .collect();
        for i in 0..observed.len() {
            let k = observed.part_labels()[i];
            let p = observed.position(i);
            let back = poses[k].inverse().apply(p);
            let (idx, _) = indexes[k].nearest(&back);
            parts[k].observed.push(*p);
            parts[k].targets.push(*model.parts[k].canonical_cloud.position(idx));
        }
        Self { parts }
    }

    fn energy(&self, poses: &[Pose]) -> f64 {
        let mut total = 0.0;
        for (k, part) in self.parts.iter().enumerate() {
            if part.observed.is_empty() {
                continue;
            }
            let inv = poses[k].inverse();
            let mut sum = 0.0;
            for (p, c) in part.observed.iter().zip(&part.targets) {
                sum += (inv.apply(p) - c).norm_squared();
            }
            total += sum / part.observed.len() as f64;
        }
        total
    }
}

/// Geometric alignment energy with exact correspondences: per part, the
/// mean squared residual between back-transformed observed points and
/// their canonical counterparts, summed over parts.
pub fn e_geo(
    poses: &[Pose],
    observed: &PointCloud,
    model: &ArticulatedModel,
) -> Result<f64, KinoptError> {
    check_parts(poses, model)?;
    Ok(GeoProblem::from_exact(observed, model)?.energy(poses))
}

/// Kinematic consistency energy over all joints.
///
/// Revolute: `|T_parent q - T_child q|^2` for the homogeneous axis point.
/// Prismatic: `|R_parent u - R_child u|^2` for the axis direction, since
/// sliding leaves no fixed point to compare.
pub fn e_kin(poses: &[Pose], model: &ArticulatedModel) -> f64 {
    model
        .joints
        .iter()
        .map(|joint| joint_residual(joint, &poses[joint.parent], &poses[joint.child]).norm_squared())
        .sum()
}

fn joint_residual(
    joint: &crate::model::Joint,
    parent: &Pose,
    child: &Pose,
) -> Vector3<f64> {
    match joint.joint_type {
        JointType::Revolute => parent.apply(&joint.axis_point) - child.apply(&joint.axis_point),
        JointType::Prismatic => parent.rotate(&joint.axis_dir) - child.rotate(&joint.axis_dir),
    }
}

fn check_parts(poses: &[Pose], model: &ArticulatedModel) -> Result<(), KinoptError> {
    if poses.len() != model.num_parts() {
        return Err(KinoptError::PartCountMismatch {
            got: poses.len(),
            expected: model.num_parts(),
        });
    }
    Ok(())
}

/// The combined energy for a fixed correspondence set.
fn comp_energy(poses: &[Pose], geo: &GeoProblem, model: &ArticulatedModel, cfg: &OptimizerConfig) -> f64 {
    cfg.geo_weight * geo.energy(poses) + cfg.kin_weight * e_kin(poses, model)
}

/// Refine coarse per-part poses by minimizing `E_comp`.
///
/// Damped Gauss-Newton in the tangent space at the current estimate
/// (updates applied through the exponential map) with numeric residual
/// Jacobians and a backtracking line search; the returned energy never
/// exceeds the input energy.
pub fn optimize(
    coarse: &[Pose],
    observed: &PointCloud,
    model: &ArticulatedModel,
    cfg: &OptimizerConfig,
) -> Result<(Vec<Pose>, OptimizeReport), KinoptError> {
    check_parts(coarse, model)?;
    let rounds = match cfg.correspondence {
        Correspondence::Exact => 1,
        Correspondence::Nearest { rounds } => rounds.max(1),
    };
    let mut poses = coarse.to_vec();
    let mut report = OptimizeReport {
        energy_before: f64::NAN,
        energy_after: f64::NAN,
        iterations: 0,
        improved: false,
    };
    for round in 0..rounds {
        let geo = match cfg.correspondence {
            Correspondence::Exact => GeoProblem::from_exact(observed, model)?,
            Correspondence::Nearest { .. } => GeoProblem::from_nearest(observed, model, &poses),
        };
        if round == 0 {
            report.energy_before = comp_energy(&poses, &geo, model, cfg);
        }
        let (refined, iterations, energy) = gauss_newton(&poses, &geo, model, cfg);
        report.iterations += iterations;
        report.energy_after = energy;
        if iterations > 0 {
            report.improved = true;
        }
        poses = refined;
    }
    if !report.improved {
        // No step reduced the energy anywhere: hand back the input.
        return Ok((
            coarse.to_vec(),
            OptimizeReport {
                energy_after: report.energy_before,
                ..report
            },
        ));
    }
    Ok((poses, report))
}

/// Finite-difference step for the residual Jacobian.
const FD_STEP: f64 = 1e-6;

fn gauss_newton(
    start: &[Pose],
    geo: &GeoProblem,
    model: &ArticulatedModel,
    cfg: &OptimizerConfig,
) -> (Vec<Pose>, usize, f64) {
    let mut poses = start.to_vec();
    let mut energy = comp_energy(&poses, geo, model, cfg);
    let mut accepted = 0;
    for _ in 0..cfg.max_iterations {
        if energy <= cfg.energy_tolerance {
            break; // already at the floor; nothing worth improving
        }
        let residuals = residual_vector(&poses, geo, model, cfg);
        let jacobian = numeric_jacobian(&poses, geo, model, cfg, &residuals);
        let h = jacobian.transpose() * &jacobian;
        let g = jacobian.transpose() * &residuals;
        // Light Levenberg damping keeps flat directions harmless.
        let n = h.nrows();
        let damping = 1e-9 * (h.trace() / n as f64).max(1e-12);
        let mut h_damped = h;
        for i in 0..n {
            h_damped[(i, i)] += damping;
        }
        let step = match h_damped.cholesky() {
            Some(chol) => -chol.solve(&g),
            None => break,
        };
        // Backtracking line search with rollback.
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..12 {
            let candidate = apply_step(&poses, &(alpha * &step));
            let cand_energy = comp_energy(&candidate, geo, model, cfg);
            if cand_energy < energy {
                let step_norm = (alpha * &step).norm();
                poses = candidate;
                let gain = energy - cand_energy;
                energy = cand_energy;
                accepted += 1;
                improved = true;
                if gain < cfg.energy_tolerance || step_norm < cfg.step_tolerance {
                    return (poses, accepted, energy);
                }
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (poses, accepted, energy)
}

fn apply_step(poses: &[Pose], step: &DVector<f64>) -> Vec<Pose> {
    poses
        .iter()
        .enumerate()
        .map(|(k, pose)| {
            let xi = Twist::new(
                Vector3::new(step[6 * k], step[6 * k + 1], step[6 * k + 2]),
                Vector3::new(step[6 * k + 3], step[6 * k + 4], step[6 * k + 5]),
            );
            pose.compose(&Pose::exp(&xi))
        })
        .collect()
}

/// Residual layout: per part, its geo residuals scaled by
/// `sqrt(geo_weight / N_k)`; then per joint, its residual scaled by
/// `sqrt(kin_weight)`. The squared norm of this vector is `E_comp`.
fn residual_vector(
    poses: &[Pose],
    geo: &GeoProblem,
    model: &ArticulatedModel,
    cfg: &OptimizerConfig,
) -> DVector<f64> {
    let m: usize = geo.parts.iter().map(|p| 3 * p.observed.len()).sum::<usize>()
        + 3 * model.joints.len();
    let mut r = DVector::zeros(m);
    let mut row = 0;
    for (k, part) in geo.parts.iter().enumerate() {
        if part.observed.is_empty() {
            continue;
        }
        let scale = (cfg.geo_weight / part.observed.len() as f64).sqrt();
        let inv = poses[k].inverse();
        for (p, c) in part.observed.iter().zip(&part.targets) {
            let res = (inv.apply(p) - c) * scale;
            r[row] = res.x;
            r[row + 1] = res.y;
            r[row + 2] = res.z;
            row += 3;
        }
    }
    let kin_scale = cfg.kin_weight.sqrt();
    for joint in &model.joints {
        let res = joint_residual(joint, &poses[joint.parent], &poses[joint.child]) * kin_scale;
        r[row] = res.x;
        r[row + 1] = res.y;
        r[row + 2] = res.z;
        row += 3;
    }
    r
}

/// Central-difference Jacobian of the residual vector. Only the blocks a
/// parameter can influence are recomputed: the part's own geo residuals
/// and the joints touching that part.
fn numeric_jacobian(
    poses: &[Pose],
    geo: &GeoProblem,
    model: &ArticulatedModel,
    cfg: &OptimizerConfig,
    residuals: &DVector<f64>,
) -> DMatrix<f64> {
    let n = 6 * poses.len();
    let m = residuals.len();
    let mut jac = DMatrix::zeros(m, n);

    // Row offsets of each part's geo block.
    let mut geo_offset = Vec::with_capacity(geo.parts.len());
    let mut row = 0;
    for part in &geo.parts {
        geo_offset.push(row);
        row += 3 * part.observed.len();
    }
    let kin_offset = row;

    for k in 0..poses.len() {
        for c in 0..6 {
            let col = 6 * k + c;
            let mut delta = [0.0; 6];
            delta[c] = FD_STEP;
            let perturb = |sign: f64| {
                let xi = Twist::new(
                    Vector3::new(delta[0], delta[1], delta[2]) * sign,
                    Vector3::new(delta[3], delta[4], delta[5]) * sign,
                );
                poses[k].compose(&Pose::exp(&xi))
            };
            let plus = perturb(1.0);
            let minus = perturb(-1.0);

            // Geo block of part k.
            let part = &geo.parts[k];
            if !part.observed.is_empty() {
                let scale = (cfg.geo_weight / part.observed.len() as f64).sqrt();
                let inv_p = plus.inverse();
                let inv_m = minus.inverse();
                let mut r = geo_offset[k];
                for (p, c_t) in part.observed.iter().zip(&part.targets) {
                    let diff = ((inv_p.apply(p) - c_t) - (inv_m.apply(p) - c_t)) * scale
                        / (2.0 * FD_STEP);
                    jac[(r, col)] = diff.x;
                    jac[(r + 1, col)] = diff.y;
                    jac[(r + 2, col)] = diff.z;
                    r += 3;
                }
            }

            // Joints touching part k.
            let kin_scale = cfg.kin_weight.sqrt();
            for (j, joint) in model.joints.iter().enumerate() {
                if joint.parent != k && joint.child != k {
                    continue;
                }
                let pick = |which: usize, alt: &Pose| -> Pose {
                    if which == k {
                        *alt
                    } else {
                        poses[which]
                    }
                };
                let res_p = joint_residual(joint, &pick(joint.parent, &plus), &pick(joint.child, &plus));
                let res_m =
                    joint_residual(joint, &pick(joint.parent, &minus), &pick(joint.child, &minus));
                let diff = (res_p - res_m) * kin_scale / (2.0 * FD_STEP);
                let r = kin_offset + 3 * j;
                jac[(r, col)] = diff.x;
                jac[(r + 1, col)] = diff.y;
                jac[(r + 2, col)] = diff.z;
            }
        }
    }
    jac
}
