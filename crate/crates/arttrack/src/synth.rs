//! Synthetic articulated models and ground-truth-annotated sequences.
//!
//! Five desk-scale templates (laptop, dishwasher, drawer, scissors,
//! eyeglasses) are assembled from axis-aligned boxes into 2-4 part
//! kinematic chains; canonical clouds are sampled uniformly on the box
//! surfaces and dimensions are jittered per seed. A [`MotionScript`]
//! drives joint values and the base pose; rendering places every part by
//! forward kinematics, records the ground-truth poses and scales, adds
//! Gaussian point noise, and culls a view-dependent half-space to emulate
//! partial observation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use thiserror::Error;

use crate::cloud::{self, CloudError, PointCloud};
use crate::model::{ArticulatedModel, Joint, JointType, ModelError, Part, TruthSequence};
use crate::se3::{Pose, Twist};
use crate::seed;
use crate::tracker::{self, ResultRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("motion script does not cover frame {frame} for joint {joint}")]
    ScriptGap { joint: usize, frame: usize },
    #[error("script has {got} joint tracks, model has {expected} joints")]
    JointCountMismatch { got: usize, expected: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tracker(#[from] tracker::TrackerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    Laptop,
    Dishwasher,
    Drawer,
    Scissors,
    Eyeglasses,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::Laptop,
        Template::Dishwasher,
        Template::Drawer,
        Template::Scissors,
        Template::Eyeglasses,
    ];

    pub fn parse(s: &str) -> Result<Self, SynthError> {
        match s {
            "laptop" => Ok(Self::Laptop),
            "dishwasher" => Ok(Self::Dishwasher),
            "drawer" => Ok(Self::Drawer),
            "scissors" => Ok(Self::Scissors),
            "eyeglasses" => Ok(Self::Eyeglasses),
            other => Err(SynthError::UnknownTemplate(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Laptop => "laptop",
            Self::Dishwasher => "dishwasher",
            Self::Drawer => "drawer",
            Self::Scissors => "scissors",
            Self::Eyeglasses => "eyeglasses",
        }
    }
}

/// Points sampled per part surface.
const POINTS_PER_PART: usize = 2000;

/// Dimension jitter amplitude (+-15%).
const JITTER: f64 = 0.15;

/// Camera position for visibility culling and normal orientation.
pub fn camera_position() -> Vector3<f64> {
    Vector3::new(0.0, 0.6, 2.0)
}

/// Uniform surface sample of an axis-aligned box, with outward face
/// normals.
fn sample_box(
    center: Vector3<f64>,
    extents: Vector3<f64>,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let half = extents / 2.0;
    // Face areas: +-x, +-y, +-z.
    let areas = [
        extents.y * extents.z,
        extents.y * extents.z,
        extents.x * extents.z,
        extents.x * extents.z,
        extents.x * extents.y,
        extents.x * extents.y,
    ];
    let total: f64 = areas.iter().sum();
    let mut positions = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        for (f, a) in areas.iter().enumerate() {
            if pick < *a {
                face = f;
                break;
            }
            pick -= a;
        }
        let u = rng.random_range(-1.0..1.0);
        let v = rng.random_range(-1.0..1.0);
        let (offset, normal) = match face {
            0 => (Vector3::new(half.x, u * half.y, v * half.z), Vector3::x()),
            1 => (Vector3::new(-half.x, u * half.y, v * half.z), -Vector3::x()),
            2 => (Vector3::new(u * half.x, half.y, v * half.z), Vector3::y()),
            3 => (Vector3::new(u * half.x, -half.y, v * half.z), -Vector3::y()),
            4 => (Vector3::new(u * half.x, v * half.y, half.z), Vector3::z()),
            _ => (Vector3::new(u * half.x, v * half.y, -half.z), -Vector3::z()),
        };
        positions.push(center + offset);
        normals.push(normal);
    }
    (positions, normals)
}

struct BoxSpec {
    center: Vector3<f64>,
    extents: Vector3<f64>,
}

fn part_from_box(spec: &BoxSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Part {
    let (positions, normals) = sample_box(spec.center, spec.extents, POINTS_PER_PART, rng);
    let n = positions.len();
    Part {
        canonical_cloud: PointCloud::new(positions, normals, vec![0; n]).expect("parallel arrays"),
        extents: spec.extents,
        center: spec.center,
    }
}

/// Build a template model with seed-jittered dimensions. Canonical space
/// is y-up; each part frame sits at its box center with up = +y and
/// right = +x.
pub fn make_model(template: Template, seed_value: u64) -> ArticulatedModel {
    let mut rng = seed::rng(seed_value, &[0x6d_6f_64_65_6c]);
    let mut jitter = |base: f64| base * (1.0 + JITTER * rng.random_range(-1.0..1.0));
    let (boxes, joints) = match template {
        Template::Laptop => {
            let w = jitter(0.34);
            let d = jitter(0.24);
            let tb = jitter(0.02);
            let lid_h = jitter(0.22);
            let lid_t = jitter(0.012);
            (
                vec![
                    BoxSpec {
                        center: Vector3::new(0.0, tb / 2.0, 0.0),
                        extents: Vector3::new(w, tb, d),
                    },
                    BoxSpec {
                        center: Vector3::new(0.0, tb + lid_h / 2.0, -d / 2.0),
                        extents: Vector3::new(w, lid_h, lid_t),
                    },
                ],
                vec![Joint {
                    joint_type: JointType::Revolute,
                    axis_point: Vector3::new(0.0, tb, -d / 2.0),
                    axis_dir: Vector3::x(),
                    parent: 0,
                    child: 1,
                }],
            )
        }
        Template::Dishwasher => {
            let w = jitter(0.55);
            let h = jitter(0.6);
            let d = jitter(0.5);
            let door_t = jitter(0.03);
            let door_h = h * 0.85;
            (
                vec![
                    BoxSpec {
                        center: Vector3::new(0.0, h / 2.0, 0.0),
                        extents: Vector3::new(w, h, d),
                    },
                    BoxSpec {
                        center: Vector3::new(0.0, h * 0.075 + door_h / 2.0, d / 2.0 + door_t / 2.0),
                        extents: Vector3::new(w * 0.96, door_h, door_t),
                    },
                ],
                vec![Joint {
                    joint_type: JointType::Revolute,
                    axis_point: Vector3::new(0.0, h * 0.075, d / 2.0),
                    axis_dir: Vector3::x(),
                    parent: 0,
                    child: 1,
                }],
            )
        }
        Template::Drawer => {
            let w = jitter(0.5);
            let h = jitter(0.78);
            let d = jitter(0.45);
            let dw = w * 0.88;
            let dh = h * 0.26;
            let dd = d * 0.9;
            let mut boxes = vec![BoxSpec {
                center: Vector3::new(0.0, h / 2.0, 0.0),
                extents: Vector3::new(w, h, d),
            }];
            let mut joints = Vec::new();
            for i in 0..3 {
                let cy = h * (0.18 + 0.32 * i as f64);
                boxes.push(BoxSpec {
                    center: Vector3::new(0.0, cy, 0.02),
                    extents: Vector3::new(dw, dh, dd),
                });
                joints.push(Joint {
                    joint_type: JointType::Prismatic,
                    axis_point: Vector3::new(0.0, cy, 0.02),
                    axis_dir: Vector3::z(),
                    parent: 0,
                    child: i + 1,
                });
            }
            (boxes, joints)
        }
        Template::Scissors => {
            let len = jitter(0.24);
            let bw = jitter(0.012);
            let bt = jitter(0.006);
            (
                vec![
                    BoxSpec {
                        center: Vector3::new(bw * 0.7, 0.0, len * 0.25),
                        extents: Vector3::new(bw, bt, len),
                    },
                    BoxSpec {
                        center: Vector3::new(-bw * 0.7, 0.0, len * 0.25),
                        extents: Vector3::new(bw, bt, len),
                    },
                ],
                vec![Joint {
                    joint_type: JointType::Revolute,
                    axis_point: Vector3::new(0.0, 0.0, -len * 0.05),
                    axis_dir: Vector3::y(),
                    parent: 0,
                    child: 1,
                }],
            )
        }
        Template::Eyeglasses => {
            let fw = jitter(0.13);
            let fh = jitter(0.045);
            let ft = jitter(0.008);
            let tl = jitter(0.14);
            let hinge_x = fw / 2.0;
            let mut boxes = vec![BoxSpec {
                center: Vector3::zeros(),
                extents: Vector3::new(fw, fh, ft),
            }];
            let mut joints = Vec::new();
            for (i, side) in [-1.0, 1.0].iter().enumerate() {
                boxes.push(BoxSpec {
                    center: Vector3::new(side * hinge_x, 0.0, ft / 2.0 + tl / 2.0),
                    extents: Vector3::new(0.006, 0.01, tl),
                });
                joints.push(Joint {
                    joint_type: JointType::Revolute,
                    axis_point: Vector3::new(side * hinge_x, 0.0, ft / 2.0),
                    axis_dir: Vector3::y(),
                    parent: 0,
                    child: i + 1,
                });
            }
            (boxes, joints)
        }
    };
    let parts = boxes.iter().map(|b| part_from_box(b, &mut rng)).collect();
    ArticulatedModel::new(parts, joints).expect("template graphs are trees")
}

/// Per-joint value and base pose trajectories as breakpoint lists with
/// linear interpolation (twist interpolation for poses).
#[derive(Debug, Clone)]
pub struct MotionScript {
    /// One track per joint: `(frame, radians-or-meters)` breakpoints with
    /// strictly increasing frame indices.
    pub joint_tracks: Vec<Vec<(usize, f64)>>,
    /// Base pose breakpoints.
    pub base_track: Vec<(usize, Pose)>,
}

impl MotionScript {
    /// A static script: all joints and the base hold their zero pose.
    pub fn static_script(n_joints: usize, n_frames: usize) -> Self {
        let last = n_frames.saturating_sub(1);
        Self {
            joint_tracks: vec![vec![(0, 0.0), (last.max(1), 0.0)]; n_joints],
            base_track: vec![(0, Pose::identity()), (last.max(1), Pose::identity())],
        }
    }

    /// Linear ramp on every joint from 0 to `joint_total` over the whole
    /// sequence, plus an optional slow base motion (yaw + shift).
    pub fn ramp(n_joints: usize, n_frames: usize, joint_total: f64, base_motion: bool) -> Self {
        let last = n_frames.saturating_sub(1).max(1);
        let base_end = if base_motion {
            Pose::exp(&Twist::new(
                Vector3::new(0.0, 0.25, 0.0),
                Vector3::new(0.08, 0.04, -0.06),
            ))
        } else {
            Pose::identity()
        };
        Self {
            joint_tracks: vec![vec![(0, 0.0), (last, joint_total)]; n_joints],
            base_track: vec![(0, Pose::identity()), (last, base_end)],
        }
    }

    fn check_coverage(&self, n_frames: usize) -> Result<(), SynthError> {
        for (j, track) in self.joint_tracks.iter().enumerate() {
            let covered = track.first().is_some_and(|f| f.0 == 0)
                && track.last().is_some_and(|l| l.0 + 1 >= n_frames);
            if !covered {
                let frame = track.last().map(|l| l.0 + 1).unwrap_or(0);
                return Err(SynthError::ScriptGap { joint: j, frame });
            }
        }
        Ok(())
    }

    pub fn joint_value(&self, joint: usize, frame: usize) -> f64 {
        interpolate(&self.joint_tracks[joint], frame, |a, b, s| a + (b - a) * s)
    }

    pub fn base_pose(&self, frame: usize) -> Pose {
        interpolate(&self.base_track, frame, |a, b, s| {
            // Geodesic interpolation through the relative twist.
            let rel = a.inverse().compose(&b);
            match rel.log() {
                Ok(xi) => a.compose(&Pose::exp(&Twist::new(xi.omega * s, xi.v * s))),
                Err(_) => if s < 0.5 { a } else { b },
            }
        })
    }
}

fn interpolate<T: Copy>(track: &[(usize, T)], frame: usize, lerp: impl Fn(T, T, f64) -> T) -> T {
    assert!(!track.is_empty(), "empty track");
    if frame <= track[0].0 {
        return track[0].1;
    }
    for window in track.windows(2) {
        let (f0, v0) = window[0];
        let (f1, v1) = window[1];
        if frame <= f1 {
            let s = (frame - f0) as f64 / (f1 - f0).max(1) as f64;
            return lerp(v0, v1, s);
        }
    }
    track.last().unwrap().1
}

/// Rigid motion of a joint at the given value, in canonical coordinates.
fn joint_motion(joint: &Joint, value: f64) -> Pose {
    match joint.joint_type {
        JointType::Revolute => Pose::rotation_about_axis(&joint.axis_point, &joint.axis_dir, value),
        JointType::Prismatic => Pose::from_translation(joint.axis_dir * value),
    }
}

/// Place every part: `T_k = base * (product of joint motions along the
/// path from the root)`.
pub fn forward_kinematics(
    model: &ArticulatedModel,
    base: &Pose,
    joint_values: &[f64],
) -> Vec<Pose> {
    assert_eq!(joint_values.len(), model.joints.len());
    let mut motion: Vec<Option<Pose>> = vec![None; model.num_parts()];
    motion[0] = Some(Pose::identity());
    let mut stack = vec![0usize];
    while let Some(parent) = stack.pop() {
        let parent_motion = motion[parent].expect("visited");
        for (j, joint) in model.joints.iter().enumerate() {
            if joint.parent == parent && motion[joint.child].is_none() {
                motion[joint.child] = Some(parent_motion.compose(&joint_motion(joint, joint_values[j])));
                stack.push(joint.child);
            }
        }
    }
    motion
        .into_iter()
        .map(|m| base.compose(&m.expect("tree is connected")))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseParams {
    /// Std-dev of isotropic Gaussian point noise (meters).
    pub sigma_point: f64,
    /// Fraction of points kept by the view-dependent half-space cull.
    pub visibility: f64,
}

impl NoiseParams {
    pub fn clean() -> Self {
        Self {
            sigma_point: 0.0,
            visibility: 1.0,
        }
    }
}

/// An in-memory rendered sequence: per-frame observed clouds plus the
/// ground truth that produced them.
#[derive(Debug, Clone)]
pub struct RenderedSequence {
    pub frames: Vec<PointCloud>,
    pub truth: TruthSequence,
}

/// Render `n_frames` frames of the scripted motion.
pub fn render_sequence(
    model: &ArticulatedModel,
    script: &MotionScript,
    n_frames: usize,
    noise: NoiseParams,
    seed_value: u64,
) -> Result<RenderedSequence, SynthError> {
    if script.joint_tracks.len() != model.joints.len() {
        return Err(SynthError::JointCountMismatch {
            got: script.joint_tracks.len(),
            expected: model.joints.len(),
        });
    }
    script.check_coverage(n_frames)?;
    let scales: Vec<Vector3<f64>> = model.parts.iter().map(Part::scale).collect();
    let mut frames = Vec::with_capacity(n_frames);
    let mut truth = TruthSequence {
        poses: Vec::with_capacity(n_frames),
        scales: Vec::with_capacity(n_frames),
    };
    for t in 0..n_frames {
        let joint_values: Vec<f64> = (0..model.joints.len())
            .map(|j| script.joint_value(j, t))
            .collect();
        let poses = forward_kinematics(model, &script.base_pose(t), &joint_values);
        let cloud = render_frame(model, &poses, noise, seed_value, t)?;
        frames.push(cloud);
        truth.poses.push(poses);
        truth.scales.push(scales.clone());
    }
    Ok(RenderedSequence { frames, truth })
}

fn render_frame(
    model: &ArticulatedModel,
    poses: &[Pose],
    noise: NoiseParams,
    seed_value: u64,
    frame_index: usize,
) -> Result<PointCloud, SynthError> {
    use rand_distr::{Distribution, Normal};
    let placed: Vec<PointCloud> = model
        .parts
        .iter()
        .enumerate()
        .map(|(k, part)| {
            let n = part.canonical_cloud.len();
            PointCloud::new(
                part.canonical_cloud
                    .positions()
                    .iter()
                    .map(|p| poses[k].apply(p))
                    .collect(),
                part.canonical_cloud
                    .normals()
                    .iter()
                    .map(|nv| poses[k].rotate(nv))
                    .collect(),
                vec![k; n],
            )
            .expect("parallel arrays")
            .with_canon_indices((0..n).collect())
            .expect("matching length")
        })
        .collect();
    let mut cloud = PointCloud::concat(&placed.iter().collect::<Vec<_>>());

    if noise.visibility < 1.0 {
        let dir = camera_position().normalize();
        let mut scores: Vec<(f64, usize)> = cloud
            .positions()
            .iter()
            .enumerate()
            .map(|(i, p)| (p.dot(&dir), i))
            .collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let keep = ((cloud.len() as f64 * noise.visibility).ceil() as usize).max(1);
        let mut indices: Vec<usize> = scores[..keep].iter().map(|s| s.1).collect();
        indices.sort_unstable();
        cloud = cloud.subset(&indices);
    }

    if noise.sigma_point > 0.0 {
        let mut rng = seed::rng(seed_value, &[0x6e_6f_69_73_65, frame_index as u64]);
        let normal = Normal::new(0.0, noise.sigma_point).expect("positive sigma");
        let positions: Vec<Vector3<f64>> = cloud
            .positions()
            .iter()
            .map(|p| {
                p + Vector3::new(
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                )
            })
            .collect();
        let noisy = PointCloud::new(positions, cloud.normals().to_vec(), cloud.part_labels().to_vec())?
            .with_canon_indices(cloud.canon_indices().unwrap().to_vec())?;
        // Surface normals are meaningless after corruption; re-estimate.
        let k = 16.min(noisy.len().saturating_sub(1)).max(1);
        cloud = noisy.estimate_normals(k, &camera_position())?;
    }
    Ok(cloud)
}

/// Paths and parameters of a generated sequence on disk.
#[derive(Debug, Clone)]
pub struct SequenceManifest {
    pub model_path: PathBuf,
    pub truth_path: PathBuf,
    pub frame_paths: Vec<PathBuf>,
    pub corr_paths: Vec<PathBuf>,
    pub seed: u64,
    pub sigma_point: f64,
    pub visibility: f64,
}

/// Write model, frames (+ correspondence sidecars), ground truth and the
/// manifest into `dir`; returns the manifest path.
pub fn write_sequence(
    dir: &Path,
    name: &str,
    model: &ArticulatedModel,
    rendered: &RenderedSequence,
    seed_value: u64,
    noise: NoiseParams,
) -> Result<PathBuf, SynthError> {
    std::fs::create_dir_all(dir)?;
    let model_path = crate::model::write_model(dir, name, model)?;
    let model_file = model_path.file_name().unwrap().to_string_lossy().to_string();

    let truth_file = format!("{name}_truth.txt");
    let records: Vec<ResultRecord> = rendered
        .truth
        .poses
        .iter()
        .enumerate()
        .flat_map(|(t, poses)| {
            poses.iter().enumerate().map(move |(k, pose)| ResultRecord {
                frame: t,
                part: k,
                pose: *pose,
                scale: rendered.truth.scales[t][k],
                energy: 0.0,
                keyframe_updated: false,
                seconds: 0.0,
            })
        })
        .collect();
    tracker::write_result_file(&dir.join(&truth_file), &records)?;

    let mut manifest = String::new();
    writeln!(manifest, "model {model_file}").unwrap();
    writeln!(manifest, "truth {truth_file}").unwrap();
    writeln!(manifest, "seed {seed_value}").unwrap();
    writeln!(
        manifest,
        "noise sigma_point {} visibility {}",
        noise.sigma_point, noise.visibility
    )
    .unwrap();
    writeln!(manifest, "frames {}", rendered.frames.len()).unwrap();
    for (t, frame) in rendered.frames.iter().enumerate() {
        let frame_file = format!("{name}_frame{t:04}.txt");
        let corr_file = format!("{name}_frame{t:04}.corr");
        cloud::write_frame_file(&dir.join(&frame_file), frame)?;
        cloud::write_corr_file(&dir.join(&corr_file), frame.canon_indices().unwrap())?;
        writeln!(manifest, "frame {t} {frame_file} corr {corr_file}").unwrap();
    }
    let path = dir.join(format!("{name}_manifest.txt"));
    std::fs::write(&path, manifest)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<SequenceManifest, SynthError> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| SynthError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut manifest = SequenceManifest {
        model_path: PathBuf::new(),
        truth_path: PathBuf::new(),
        frame_paths: Vec::new(),
        corr_paths: Vec::new(),
        seed: 0,
        sigma_point: 0.0,
        visibility: 1.0,
    };
    let mut n_frames = 0usize;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let lno = lineno + 1;
        match fields[0] {
            "model" => manifest.model_path = dir.join(fields[1]),
            "truth" => manifest.truth_path = dir.join(fields[1]),
            "seed" => {
                manifest.seed = fields[1]
                    .parse()
                    .map_err(|_| err(lno, format!("bad seed `{}`", fields[1])))?
            }
            "noise" => {
                if fields.len() != 5 || fields[1] != "sigma_point" || fields[3] != "visibility" {
                    return Err(err(lno, "malformed noise record".into()));
                }
                manifest.sigma_point = fields[2]
                    .parse()
                    .map_err(|_| err(lno, "bad sigma".into()))?;
                manifest.visibility = fields[4]
                    .parse()
                    .map_err(|_| err(lno, "bad visibility".into()))?;
            }
            "frames" => {
                n_frames = fields[1]
                    .parse()
                    .map_err(|_| err(lno, "bad frame count".into()))?
            }
            "frame" => {
                if fields.len() < 3 {
                    return Err(err(lno, "malformed frame record".into()));
                }
                manifest.frame_paths.push(dir.join(fields[2]));
                if fields.len() >= 5 && fields[3] == "corr" {
                    manifest.corr_paths.push(dir.join(fields[4]));
                }
            }
            other => return Err(err(lno, format!("unknown record `{other}`"))),
        }
    }
    if manifest.frame_paths.len() != n_frames {
        return Err(err(
            0,
            format!(
                "manifest declares {n_frames} frames but lists {}",
                manifest.frame_paths.len()
            ),
        ));
    }
    Ok(manifest)
}

/// Load everything a tracking run needs from a manifest.
pub fn load_sequence(
    manifest: &SequenceManifest,
) -> Result<(ArticulatedModel, Vec<PointCloud>, TruthSequence), SynthError> {
    let model = crate::model::read_model(&manifest.model_path)?;
    let mut frames = Vec::with_capacity(manifest.frame_paths.len());
    for (t, path) in manifest.frame_paths.iter().enumerate() {
        let mut frame = cloud::read_frame_file(path)?;
        if let Some(corr_path) = manifest.corr_paths.get(t) {
            let indices = cloud::read_corr_file(corr_path)?;
            frame = frame.with_canon_indices(indices)?;
        }
        frames.push(frame);
    }
    let truth = tracker::read_truth_file(&manifest.truth_path, model.num_parts())?;
    Ok((model, frames, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinopt;

    #[test]
    fn templates_have_the_documented_part_and_joint_structure() {
        let cases = [
            (Template::Laptop, 2, vec![JointType::Revolute]),
            (Template::Dishwasher, 2, vec![JointType::Revolute]),
            (
                Template::Drawer,
                4,
                vec![
                    JointType::Prismatic,
                    JointType::Prismatic,
                    JointType::Prismatic,
                ],
            ),
            (Template::Scissors, 2, vec![JointType::Revolute]),
            (
                Template::Eyeglasses,
                3,
                vec![JointType::Revolute, JointType::Revolute],
            ),
        ];
        for (template, parts, joint_types) in cases {
            let model = make_model(template, 7);
            assert_eq!(model.num_parts(), parts, "{template:?}");
            let types: Vec<JointType> = model.joints.iter().map(|j| j.joint_type).collect();
            assert_eq!(types, joint_types, "{template:?}");
            for part in &model.parts {
                assert_eq!(part.canonical_cloud.len(), POINTS_PER_PART);
                assert!(part.extents.min() > 0.0);
            }
        }
        assert!(matches!(
            Template::parse("toaster"),
            Err(SynthError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn dimensions_jitter_with_the_seed() {
        let a = make_model(Template::Laptop, 1);
        let b = make_model(Template::Laptop, 2);
        assert_ne!(a.parts[0].extents, b.parts[0].extents);
        let a2 = make_model(Template::Laptop, 1);
        assert_eq!(a.parts[0].extents, a2.parts[0].extents);
    }

    #[test]
    fn revolute_fk_matches_the_analytic_rotation() {
        let model = make_model(Template::Laptop, 3);
        let theta = 0.6;
        let base = Pose::exp(&Twist::new(
            Vector3::new(0.1, 0.3, -0.2),
            Vector3::new(0.4, 0.1, 0.2),
        ));
        let poses = forward_kinematics(&model, &base, &[theta]);
        assert!((poses[0].matrix() - base.matrix()).amax() < 1e-12);
        let joint = &model.joints[0];
        let expected = base.compose(&Pose::rotation_about_axis(
            &joint.axis_point,
            &joint.axis_dir,
            theta,
        ));
        assert!((poses[1].matrix() - expected.matrix()).amax() < 1e-12);
        // A canonical point on the child moves by exactly that rotation.
        let p = model.parts[1].canonical_cloud.position(17);
        let moved = poses[1].apply(p);
        assert!((moved - expected.apply(p)).amax() < 1e-12);
    }

    #[test]
    fn ground_truth_is_kinematically_consistent_for_all_templates() {
        for template in Template::ALL {
            let model = make_model(template, 11);
            let script = MotionScript::ramp(model.joints.len(), 12, 0.5, true);
            let rendered = render_sequence(&model, &script, 12, NoiseParams::clean(), 4).unwrap();
            for poses in &rendered.truth.poses {
                let energy = kinopt::e_kin(poses, &model);
                assert!(energy < 1e-20, "{template:?}: residual {energy}");
            }
        }
    }

    #[test]
    fn static_clean_render_reproduces_the_posed_canonical_cloud() {
        let model = make_model(Template::Dishwasher, 5);
        let script = MotionScript::static_script(model.joints.len(), 4);
        let rendered = render_sequence(&model, &script, 4, NoiseParams::clean(), 9).unwrap();
        let canonical = model.canonical_cloud();
        for frame in &rendered.frames {
            assert_eq!(frame.positions(), canonical.positions());
            assert_eq!(frame.normals(), canonical.normals());
            assert_eq!(frame.part_labels(), canonical.part_labels());
        }
    }

    #[test]
    fn segment_increments_recompose_the_absolute_pose() {
        let model = make_model(Template::Laptop, 6);
        let script = MotionScript::ramp(model.joints.len(), 20, 1.0, true);
        let rendered = render_sequence(&model, &script, 20, NoiseParams::clean(), 10).unwrap();
        // Arbitrary segmentation: keyframes at 0, 7, 13.
        let keyframes = [0usize, 7, 13];
        for t in 0..20 {
            let kf = *keyframes.iter().filter(|&&n| n <= t).max().unwrap();
            for k in 0..model.num_parts() {
                let t_kf = &rendered.truth.poses[kf][k];
                let delta = t_kf.inverse().compose(&rendered.truth.poses[t][k]);
                let recomposed = t_kf.compose(&delta);
                assert!(
                    (recomposed.matrix() - rendered.truth.poses[t][k].matrix()).amax() < 1e-9
                );
            }
        }
    }

    #[test]
    fn visibility_culls_to_the_requested_fraction() {
        let model = make_model(Template::Laptop, 8);
        let script = MotionScript::static_script(model.joints.len(), 2);
        let noise = NoiseParams {
            sigma_point: 0.0,
            visibility: 0.5,
        };
        let rendered = render_sequence(&model, &script, 2, noise, 12).unwrap();
        let full = 2 * POINTS_PER_PART;
        for frame in &rendered.frames {
            let frac = frame.len() as f64 / full as f64;
            assert!((frac - 0.5).abs() < 0.02, "kept {frac}");
        }
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        let model = make_model(Template::Scissors, 13);
        let script = MotionScript::ramp(model.joints.len(), 5, 0.4, false);
        let noise = NoiseParams {
            sigma_point: 0.003,
            visibility: 0.8,
        };
        let a = render_sequence(&model, &script, 5, noise, 21).unwrap();
        let b = render_sequence(&model, &script, 5, noise, 21).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.positions(), fb.positions());
            assert_eq!(fa.normals(), fb.normals());
        }
    }

    #[test]
    fn script_gaps_are_rejected() {
        let model = make_model(Template::Laptop, 14);
        let script = MotionScript {
            joint_tracks: vec![vec![(0, 0.0), (3, 0.5)]],
            base_track: vec![(0, Pose::identity())],
        };
        assert!(matches!(
            render_sequence(&model, &script, 10, NoiseParams::clean(), 0),
            Err(SynthError::ScriptGap { joint: 0, frame: 4 })
        ));
    }

    #[test]
    fn sequence_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let model = make_model(Template::Eyeglasses, 15);
        let script = MotionScript::ramp(model.joints.len(), 3, 0.3, true);
        let noise = NoiseParams {
            sigma_point: 0.002,
            visibility: 0.9,
        };
        let rendered = render_sequence(&model, &script, 3, noise, 33).unwrap();
        let manifest_path =
            write_sequence(dir.path(), "glasses", &model, &rendered, 33, noise).unwrap();
        let manifest = read_manifest(&manifest_path).unwrap();
        assert_eq!(manifest.seed, 33);
        assert_eq!(manifest.frame_paths.len(), 3);
        assert_eq!(manifest.visibility, 0.9);

        let (model_back, frames, truth) = load_sequence(&manifest).unwrap();
        assert_eq!(model_back.num_parts(), 3);
        assert_eq!(frames.len(), 3);
        assert_eq!(truth.poses.len(), 3);
        for (fa, fb) in rendered.frames.iter().zip(&frames) {
            assert_eq!(fa.positions(), fb.positions());
            assert_eq!(fa.canon_indices().unwrap(), fb.canon_indices().unwrap());
        }
        for t in 0..3 {
            for k in 0..3 {
                let diff =
                    (truth.poses[t][k].matrix() - rendered.truth.poses[t][k].matrix()).amax();
                assert!(diff < 1e-15);
            }
        }
    }
}
