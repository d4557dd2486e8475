//! Articulated model: rigid parts with canonical clouds and extents,
//! connected by revolute or prismatic joints forming a tree.
//!
//! The canonical frame convention is fixed here and everywhere else in
//! the crate: a part frame sits at the part's canonical center with the
//! up axis `e1 = +y` and the right axis `e2 = +x`. Per-part ground-truth
//! scale is the canonical extents normalized by the largest extent.
//!
//! The model file is a structured text manifest:
//!
//! ```text
//! parts 2
//! joints 1
//! part 0 cloud part0.txt extents 0.34 0.02 0.24 center 0 0.01 0
//! part 1 cloud part1.txt extents 0.34 0.23 0.015 center 0 0.135 -0.1275
//! joint 0 type revolute point 0 0.02 -0.12 dir 1 0 0 parent 0 child 1
//! ```
//!
//! Cloud paths are relative to the manifest location.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::cloud::{self, PointCloud};
use crate::se3::Pose;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("joint graph is not a connected tree")]
    NotATree,
    #[error("joint {joint} references unknown part {part}")]
    UnknownPart { joint: usize, part: usize },
    #[error(transparent)]
    Cloud(#[from] cloud::CloudError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointType {
    Revolute,
    Prismatic,
}

impl JointType {
    pub fn as_str(&self) -> &'static str {
        match self {
            JointType::Revolute => "revolute",
            JointType::Prismatic => "prismatic",
        }
    }
}

/// A joint between two parts: axis point `q` and unit direction `u` in
/// canonical space.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub joint_type: JointType,
    pub axis_point: Vector3<f64>,
    pub axis_dir: Vector3<f64>,
    pub parent: usize,
    pub child: usize,
}

/// One rigid part: canonical surface cloud, axis-aligned canonical
/// extents, and the canonical frame center.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub canonical_cloud: PointCloud,
    pub extents: Vector3<f64>,
    pub center: Vector3<f64>,
}

impl Part {
    /// Ground-truth per-part scale: extents normalized by the largest
    /// extent.
    pub fn scale(&self) -> Vector3<f64> {
        self.extents / self.extents.max()
    }

    /// Canonical part frame as a pose (identity rotation by convention,
    /// translation at the part center).
    pub fn frame(&self) -> Pose {
        Pose::from_translation(self.center)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticulatedModel {
    pub parts: Vec<Part>,
    pub joints: Vec<Joint>,
}

impl ArticulatedModel {
    pub fn new(parts: Vec<Part>, joints: Vec<Joint>) -> Result<Self, ModelError> {
        let model = Self { parts, joints };
        model.validate()?;
        Ok(model)
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    /// Union of all canonical part clouds, labelled by part index and
    /// carrying canonical correspondence indices.
    pub fn canonical_cloud(&self) -> PointCloud {
        let labelled: Vec<PointCloud> = self
            .parts
            .iter()
            .enumerate()
            .map(|(k, part)| {
                let n = part.canonical_cloud.len();
                PointCloud::new(
                    part.canonical_cloud.positions().to_vec(),
                    part.canonical_cloud.normals().to_vec(),
                    vec![k; n],
                )
                .expect("parallel arrays")
                .with_canon_indices((0..n).collect())
                .expect("matching length")
            })
            .collect();
        PointCloud::concat(&labelled.iter().collect::<Vec<_>>())
    }

    /// Diagonal of the whole canonical object's bounding box; the length
    /// scale used to normalize translation errors.
    pub fn diagonal(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for part in &self.parts {
            for p in part.canonical_cloud.positions() {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
        }
        (hi - lo).norm()
    }

    /// Children of each part in the joint tree, rooted at part 0.
    pub fn children(&self, part: usize) -> Vec<&Joint> {
        self.joints.iter().filter(|j| j.parent == part).collect()
    }

    fn validate(&self) -> Result<(), ModelError> {
        let k = self.parts.len();
        for (idx, joint) in self.joints.iter().enumerate() {
            for part in [joint.parent, joint.child] {
                if part >= k {
                    return Err(ModelError::UnknownPart { joint: idx, part });
                }
            }
            if joint.parent == joint.child {
                return Err(ModelError::NotATree);
            }
        }
        // A tree over K parts has K-1 joints and every part reachable from
        // the root.
        if k > 0 && self.joints.len() != k - 1 {
            return Err(ModelError::NotATree);
        }
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(p) = stack.pop() {
            for j in &self.joints {
                let next = if j.parent == p {
                    j.child
                } else if j.child == p {
                    j.parent
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(ModelError::NotATree);
        }
        Ok(())
    }
}

/// Ground-truth pose and scale per part per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSequence {
    /// `poses[frame][part]`
    pub poses: Vec<Vec<Pose>>,
    /// `scales[frame][part]`
    pub scales: Vec<Vec<Vector3<f64>>>,
}

impl TruthSequence {
    pub fn num_frames(&self) -> usize {
        self.poses.len()
    }
}

/// Write the model manifest plus one canonical cloud file per part into
/// `dir`.
pub fn write_model(dir: &Path, name: &str, model: &ArticulatedModel) -> Result<PathBuf, ModelError> {
    std::fs::create_dir_all(dir)?;
    let mut text = String::new();
    writeln!(text, "parts {}", model.parts.len()).unwrap();
    writeln!(text, "joints {}", model.joints.len()).unwrap();
    for (k, part) in model.parts.iter().enumerate() {
        let cloud_name = format!("{name}_part{k}.txt");
        cloud::write_frame_file(&dir.join(&cloud_name), &{
            let n = part.canonical_cloud.len();
            PointCloud::new(
                part.canonical_cloud.positions().to_vec(),
                part.canonical_cloud.normals().to_vec(),
                vec![k; n],
            )?
        })?;
        let e = part.extents;
        let c = part.center;
        writeln!(
            text,
            "part {k} cloud {cloud_name} extents {} {} {} center {} {} {}",
            e.x, e.y, e.z, c.x, c.y, c.z
        )
        .unwrap();
    }
    for (j, joint) in model.joints.iter().enumerate() {
        let q = joint.axis_point;
        let u = joint.axis_dir;
        writeln!(
            text,
            "joint {j} type {} point {} {} {} dir {} {} {} parent {} child {}",
            joint.joint_type.as_str(),
            q.x,
            q.y,
            q.z,
            u.x,
            u.y,
            u.z,
            joint.parent,
            joint.child
        )
        .unwrap();
    }
    let path = dir.join(format!("{name}_model.txt"));
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn read_model(path: &Path) -> Result<ArticulatedModel, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let err = |line: usize, msg: String| ModelError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut parts: Vec<Option<Part>> = Vec::new();
    let mut joints: Vec<Option<Joint>> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let lno = lineno + 1;
        let parse_f64 = |s: &str| -> Result<f64, ModelError> {
            s.parse().map_err(|_| err(lno, format!("bad number `{s}`")))
        };
        let parse_usize = |s: &str| -> Result<usize, ModelError> {
            s.parse().map_err(|_| err(lno, format!("bad index `{s}`")))
        };
        match fields[0] {
            "parts" => {
                parts = vec![None; parse_usize(fields[1])?];
            }
            "joints" => {
                joints = vec![None; parse_usize(fields[1])?];
            }
            "part" => {
                if fields.len() != 12
                    || fields[2] != "cloud"
                    || fields[4] != "extents"
                    || fields[8] != "center"
                {
                    return Err(err(lno, "malformed part record".into()));
                }
                let k = parse_usize(fields[1])?;
                if k >= parts.len() {
                    return Err(err(lno, format!("part index {k} out of range")));
                }
                let canonical_cloud = cloud::read_frame_file(&dir.join(fields[3]))?;
                parts[k] = Some(Part {
                    canonical_cloud,
                    extents: Vector3::new(
                        parse_f64(fields[5])?,
                        parse_f64(fields[6])?,
                        parse_f64(fields[7])?,
                    ),
                    center: Vector3::new(
                        parse_f64(fields[9])?,
                        parse_f64(fields[10])?,
                        parse_f64(fields[11])?,
                    ),
                });
            }
            "joint" => {
                if fields.len() != 16 {
                    return Err(err(lno, "malformed joint record".into()));
                }
                let j = parse_usize(fields[1])?;
                if j >= joints.len() {
                    return Err(err(lno, format!("joint index {j} out of range")));
                }
                let joint_type = match fields[3] {
                    "revolute" => JointType::Revolute,
                    "prismatic" => JointType::Prismatic,
                    other => return Err(err(lno, format!("unknown joint type `{other}`"))),
                };
                joints[j] = Some(Joint {
                    joint_type,
                    axis_point: Vector3::new(
                        parse_f64(fields[5])?,
                        parse_f64(fields[6])?,
                        parse_f64(fields[7])?,
                    ),
                    axis_dir: Vector3::new(
                        parse_f64(fields[9])?,
                        parse_f64(fields[10])?,
                        parse_f64(fields[11])?,
                    ),
                    parent: parse_usize(fields[13])?,
                    child: parse_usize(fields[15])?,
                });
            }
            other => return Err(err(lno, format!("unknown record `{other}`"))),
        }
    }
    let parts: Vec<Part> = parts
        .into_iter()
        .enumerate()
        .map(|(k, p)| p.ok_or_else(|| err(0, format!("missing part {k}"))))
        .collect::<Result<_, _>>()?;
    let joints: Vec<Joint> = joints
        .into_iter()
        .enumerate()
        .map(|(j, p)| p.ok_or_else(|| err(0, format!("missing joint {j}"))))
        .collect::<Result<_, _>>()?;
    ArticulatedModel::new(parts, joints)
}
