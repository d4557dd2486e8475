//! Temporal segmentation and quasi-canonicalization.
//!
//! A sequence is divided into temporal segments, each opened by a
//! keyframe. The keyframe stores, per part, the transform
//! `K = T_keyframe^-1`; applying it to later frames of the segment leaves
//! only the increment relative to the keyframe, which is what the voting
//! stage estimates. Dynamic Keyframe Selection promotes the current frame
//! to keyframe whenever the Chamfer+Hausdorff energy between predicted
//! and observed clouds falls below the threshold `phi`, i.e. whenever the
//! current estimate is verified good.

use nalgebra::Vector3;
use thiserror::Error;

use crate::cloud::{self, CloudError, PointCloud};
use crate::se3::Pose;

/// Keyframe update threshold used by the dynamic strategy.
pub const DEFAULT_PHI: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CanonError {
    #[error("part {part} not present in keyframe with {parts} parts")]
    UnknownPart { part: usize, parts: usize },
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// Keyframe opening a temporal segment.
#[derive(Debug, Clone)]
pub struct Keyframe {
    /// Ordinal of the segment this keyframe opens.
    pub segment_index: usize,
    /// Position of the keyframe in the original frame stream.
    pub frame_index: usize,
    /// Per-part canonicalizing transform `K^k = (T^k)^-1`.
    pub transforms: Vec<Pose>,
    /// The observed cloud at the keyframe.
    pub snapshot: PointCloud,
}

impl Keyframe {
    /// Build from the estimated per-part poses at a frame.
    pub fn from_poses(
        segment_index: usize,
        frame_index: usize,
        poses: &[Pose],
        snapshot: PointCloud,
    ) -> Self {
        Self {
            segment_index,
            frame_index,
            transforms: poses.iter().map(Pose::inverse).collect(),
            snapshot,
        }
    }

    /// Absolute pose of a part at this keyframe (the inverse of `K`).
    pub fn pose(&self, part: usize) -> Pose {
        self.transforms[part].inverse()
    }
}

/// Tracking state for the current temporal segment.
#[derive(Debug, Clone)]
pub struct SegmentState {
    pub keyframe: Keyframe,
    pub frames_since: usize,
    pub energy_history: Vec<f64>,
}

impl SegmentState {
    pub fn new(keyframe: Keyframe) -> Self {
        Self {
            keyframe,
            frames_since: 0,
            energy_history: Vec::new(),
        }
    }

    /// Dynamic Keyframe Selection step: when the energy falls strictly
    /// below `phi`, the current frame becomes the keyframe of a new
    /// segment (with `K` rebuilt from the current estimated poses) and the
    /// frame counter resets; otherwise the segment just grows.
    ///
    /// Returns whether the keyframe was updated.
    pub fn maybe_update_keyframe(
        &mut self,
        energy: f64,
        frame_index: usize,
        frame: &PointCloud,
        poses: &[Pose],
        phi: f64,
    ) -> bool {
        assert!(phi > 0.0, "phi must be positive");
        self.energy_history.push(energy);
        if energy < phi {
            self.keyframe = Keyframe::from_poses(
                self.keyframe.segment_index + 1,
                frame_index,
                poses,
                frame.clone(),
            );
            self.frames_since = 0;
            true
        } else {
            self.frames_since += 1;
            false
        }
    }
}

/// Apply the keyframe transform of `part` to that part's points of
/// `frame`: the result is the part cloud expressed in quasi-canonical
/// space (`delta_T * P_c` for the true increment `delta_T`).
pub fn quasi_canonicalize(
    frame: &PointCloud,
    keyframe: &Keyframe,
    part: usize,
) -> Result<PointCloud, CanonError> {
    if part >= keyframe.transforms.len() {
        return Err(CanonError::UnknownPart {
            part,
            parts: keyframe.transforms.len(),
        });
    }
    let indices = frame.part_point_indices(part);
    Ok(frame.subset(&indices).transformed(&keyframe.transforms[part]))
}

/// Segment energy `(D_C + D_H) / |P|` between the predicted and observed
/// clouds, with `|P|` the observed point count.
pub fn segment_energy(predicted: &PointCloud, observed: &PointCloud) -> Result<f64, CanonError> {
    let d_c = cloud::chamfer(predicted, observed)?;
    let d_h = cloud::hausdorff(predicted, observed)?;
    Ok((d_c + d_h) / observed.len() as f64)
}

/// Keyframe handling strategy for the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyframeMode {
    /// Energy-gated updates (Dynamic Keyframe Selection).
    Dynamic,
    /// The initial keyframe is never replaced.
    Fixed,
    /// Every frame becomes the next keyframe (pure frame-to-frame
    /// chaining).
    None,
}

impl KeyframeMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dynamic" => Some(Self::Dynamic),
            "fixed" => Some(Self::Fixed),
            "none" => Some(Self::None),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Dynamic => "dynamic",
            Self::Fixed => "fixed",
            Self::None => "none",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Twist;
    use rand::Rng;

    fn grid_cloud(n_side: usize, spacing: f64) -> PointCloud {
        let mut positions = Vec::new();
        for i in 0..n_side {
            for j in 0..n_side {
                positions.push(Vector3::new(i as f64 * spacing, j as f64 * spacing, 0.0));
            }
        }
        let n = positions.len();
        PointCloud::new(positions, vec![Vector3::z(); n], vec![0; n]).unwrap()
    }

    fn keyframe_with(poses: &[Pose], snapshot: &PointCloud) -> Keyframe {
        Keyframe::from_poses(0, 0, poses, snapshot.clone())
    }

    #[test]
    fn canonicalizing_the_keyframe_itself_recovers_canonical_space() {
        let canonical = grid_cloud(5, 0.1);
        let pose = Pose::exp(&Twist::new(
            Vector3::new(0.2, -0.4, 0.6),
            Vector3::new(0.5, 0.1, -0.2),
        ));
        let observed = canonical.transformed(&pose);
        let kf = keyframe_with(&[pose], &observed);
        let back = quasi_canonicalize(&observed, &kf, 0).unwrap();
        for (a, b) in back.positions().iter().zip(canonical.positions()) {
            assert!((a - b).amax() < 1e-9);
        }
        // K * T = identity.
        let compose = kf.transforms[0].compose(&pose);
        assert!((compose.matrix() - nalgebra::Matrix4::identity()).amax() < 1e-9);
    }

    #[test]
    fn known_increment_survives_canonicalization() {
        let canonical = grid_cloud(5, 0.1);
        let kf_pose = Pose::exp(&Twist::new(
            Vector3::new(0.1, 0.2, -0.3),
            Vector3::new(0.2, 0.0, 0.4),
        ));
        let delta = Pose::exp(&Twist::new(
            Vector3::new(0.05, -0.02, 0.01),
            Vector3::new(0.01, 0.03, -0.02),
        ));
        // Current absolute pose: keyframe pose followed by the increment in
        // quasi-canonical space.
        let current = kf_pose.compose(&delta);
        let observed = canonical.transformed(&current);
        let kf = keyframe_with(&[kf_pose], &observed);
        let quasi = quasi_canonicalize(&observed, &kf, 0).unwrap();
        let expected = canonical.transformed(&delta);
        for (a, b) in quasi.positions().iter().zip(expected.positions()) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn identity_keyframe_is_a_no_op() {
        let cloud = grid_cloud(4, 0.1);
        let kf = keyframe_with(&[Pose::identity()], &cloud);
        let out = quasi_canonicalize(&cloud, &kf, 0).unwrap();
        assert_eq!(out.positions(), cloud.positions());
    }

    #[test]
    fn unknown_part_is_rejected() {
        let cloud = grid_cloud(3, 0.1);
        let kf = keyframe_with(&[Pose::identity()], &cloud);
        assert!(matches!(
            quasi_canonicalize(&cloud, &kf, 3),
            Err(CanonError::UnknownPart { part: 3, parts: 1 })
        ));
    }

    #[test]
    fn energy_of_identical_clouds_is_zero() {
        let cloud = grid_cloud(6, 0.1);
        assert_eq!(segment_energy(&cloud, &cloud).unwrap(), 0.0);
    }

    #[test]
    fn energy_of_a_rigid_offset_matches_hand_value() {
        // 100 points spaced 0.5 apart, shifted by 0.1 off-plane: every
        // nearest neighbor is the point's own copy, so D_C = 0.2, D_H =
        // 0.1 and the energy is (0.2 + 0.1) / 100 = 0.003.
        let cloud = grid_cloud(10, 0.5);
        let shifted = cloud.transformed(&Pose::from_translation(Vector3::new(0.0, 0.0, 0.1)));
        let energy = segment_energy(&cloud, &shifted).unwrap();
        assert!((energy - 0.003).abs() < 1e-12, "energy {energy}");
    }

    #[test]
    fn energy_decreases_as_pose_interpolates_back_to_truth() {
        let mut rng = crate::seed::rng(81, &[]);
        let positions: Vec<Vector3<f64>> = (0..400)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )
            })
            .collect();
        let n = positions.len();
        let observed = PointCloud::new(positions, vec![Vector3::z(); n], vec![0; n]).unwrap();
        let err = Twist::new(Vector3::new(0.3, -0.2, 0.4), Vector3::new(0.1, 0.05, -0.08));
        let mut last = f64::INFINITY;
        for step in (0..=10).rev() {
            let s = step as f64 / 10.0;
            let scaled = Twist::new(err.omega * s, err.v * s);
            let predicted = observed.transformed(&Pose::exp(&scaled));
            let energy = segment_energy(&predicted, &observed).unwrap();
            assert!(
                energy <= last + 1e-12,
                "energy not decreasing: {energy} after {last}"
            );
            last = energy;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn keyframe_updates_below_phi_only() {
        let cloud = grid_cloud(4, 0.1);
        let poses = [Pose::from_translation(Vector3::new(0.1, 0.0, 0.0))];
        let phi = 0.01;

        let mut state = SegmentState::new(keyframe_with(&[Pose::identity()], &cloud));
        assert!(state.maybe_update_keyframe(0.005, 3, &cloud, &poses, phi));
        assert_eq!(state.keyframe.frame_index, 3);
        assert_eq!(state.keyframe.segment_index, 1);
        assert_eq!(state.frames_since, 0);
        let expected = poses[0].inverse();
        assert!((state.keyframe.transforms[0].matrix() - expected.matrix()).amax() < 1e-12);

        let mut state = SegmentState::new(keyframe_with(&[Pose::identity()], &cloud));
        assert!(!state.maybe_update_keyframe(0.02, 3, &cloud, &poses, phi));
        assert_eq!(state.keyframe.frame_index, 0);
        assert_eq!(state.frames_since, 1);

        // Exactly phi: strict inequality, no update.
        let mut state = SegmentState::new(keyframe_with(&[Pose::identity()], &cloud));
        assert!(!state.maybe_update_keyframe(phi, 3, &cloud, &poses, phi));
        assert_eq!(state.energy_history, vec![phi]);
    }

    #[test]
    fn keyframe_mode_parsing() {
        assert_eq!(KeyframeMode::parse("dynamic"), Some(KeyframeMode::Dynamic));
        assert_eq!(KeyframeMode::parse("fixed"), Some(KeyframeMode::Fixed));
        assert_eq!(KeyframeMode::parse("none"), Some(KeyframeMode::None));
        assert_eq!(KeyframeMode::parse("sometimes"), None);
        assert_eq!(KeyframeMode::Dynamic.as_str(), "dynamic");
    }
}
