//! Skeleton topology, bone-vector representation, local pose transforms and
//! the kinematic chain space (KCS) Gram matrix.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bones shorter than this (mm) are treated as degenerate.
pub const MIN_BONE_LENGTH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("bone {bone} has zero length")]
    ZeroBone { bone: usize },
    #[error("bone {bone} direction collapsed to zero after perturbation")]
    DegenerateDirection { bone: usize },
    #[error("bone {bone} length ratio {ratio} is not positive")]
    NonPositiveRatio { bone: usize, ratio: f64 },
    #[error("invalid ratio range [{lo}, {hi}]")]
    BadRange { lo: f64, hi: f64 },
    #[error("expected {expected} entries, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("skeleton io: {0}")]
    Io(#[from] std::io::Error),
    #[error("skeleton parse: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SkeletonError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyPart {
    Torso,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

impl BodyPart {
    pub const ALL: [BodyPart; 5] = [
        BodyPart::Torso,
        BodyPart::LeftArm,
        BodyPart::RightArm,
        BodyPart::LeftLeg,
        BodyPart::RightLeg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Root-relative 3D pose in millimetres, camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub joints: Vec<Vector3<f64>>,
}

/// 2D pose in pixels (or normalized screen units).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2D {
    pub joints: Vec<Vector2<f64>>,
}

impl Pose3D {
    pub fn new(joints: Vec<Vector3<f64>>) -> Self {
        Self { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.iter().all(|v| v.is_finite()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(self.joints.iter().map(|j| j * s).collect())
    }

    /// Flattened `[x0, y0, z0, x1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|j| [j.x, j.y, j.z]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self::new(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
    }
}

impl Pose2D {
    pub fn new(joints: Vec<Vector2<f64>>) -> Self {
        Self { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().all(|j| j.x.is_finite() && j.y.is_finite())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.joints.iter().flat_map(|j| [j.x, j.y]).collect()
    }
}

/// A bone links `parent` to `child`; bones are indexed in topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    pub part: BodyPart,
}

/// On-disk skeleton description, one JSON object on a single line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonFile {
    pub names: Vec<String>,
    pub parent: Vec<Option<usize>>,
    pub root_index: usize,
    /// Per joint; `null` for the root, otherwise the part of the bone ending
    /// at that joint.
    pub part_assignment: Vec<Option<BodyPart>>,
}

/// Validated, immutable skeleton topology.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDef {
    file: SkeletonFile,
    bones: Vec<Bone>,
    part_bones: [Vec<usize>; 5],
}

const DEFAULT_SKELETON: &str = include_str!("../data/skeleton_h36m16.jsonl");

impl SkeletonDef {
    /// 16-joint pelvis-rooted skeleton in the Human3.6M joint family.
    pub fn h36m16() -> Self {
        Self::from_json_line(DEFAULT_SKELETON).expect("bundled skeleton is valid")
    }

    pub fn from_json_line(text: &str) -> Result<Self> {
        let line = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| SkeletonError::InvalidSkeleton("empty skeleton file".into()))?;
        let file: SkeletonFile = serde_json::from_str(line.trim())?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_line(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.file).expect("skeleton serializes")
    }

    pub fn from_file(file: SkeletonFile) -> Result<Self> {
        let j = file.names.len();
        let bad = |m: String| Err(SkeletonError::InvalidSkeleton(m));
        if j < 2 {
            return bad(format!("need at least 2 joints, got {j}"));
        }
        if file.parent.len() != j || file.part_assignment.len() != j {
            return bad("names, parent and part_assignment must have equal length".into());
        }
        if file.root_index >= j {
            return bad(format!("root_index {} out of range", file.root_index));
        }
        for (i, p) in file.parent.iter().enumerate() {
            match (i == file.root_index, p, file.part_assignment[i]) {
                (true, None, None) => {}
                (true, _, _) => return bad("root must have no parent and no part".into()),
                (false, None, _) => return bad(format!("joint {i} has no parent")),
                (false, Some(_), None) => return bad(format!("bone to joint {i} has no part")),
                (false, Some(p), Some(_)) if *p >= j || *p == i => {
                    return bad(format!("joint {i} has invalid parent {p}"))
                }
                _ => {}
            }
        }
        // breadth-first from the root; anything unreached means a cycle or forest
        let mut order = vec![file.root_index];
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            head += 1;
            for (i, p) in file.parent.iter().enumerate() {
                if *p == Some(cur) {
                    order.push(i);
                }
            }
        }
        if order.len() != j {
            return bad("parent links do not form a tree rooted at root_index".into());
        }
        let bones: Vec<Bone> = order[1..]
            .iter()
            .map(|&c| Bone {
                parent: file.parent[c].unwrap(),
                child: c,
                part: file.part_assignment[c].unwrap(),
            })
            .collect();
        let mut part_bones: [Vec<usize>; 5] = Default::default();
        for (b, bone) in bones.iter().enumerate() {
            part_bones[bone.part.index()].push(b);
        }
        if let Some(p) = BodyPart::ALL.iter().find(|p| part_bones[p.index()].is_empty()) {
            return bad(format!("part {p:?} has no bones"));
        }
        Ok(Self { file, bones, part_bones })
    }

    pub fn joint_count(&self) -> usize {
        self.file.names.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn root_index(&self) -> usize {
        self.file.root_index
    }

    pub fn names(&self) -> &[String] {
        &self.file.names
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.file.parent[joint]
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    /// Bone indices belonging to `part`, in topological order.
    pub fn part_bones(&self, part: BodyPart) -> &[usize] {
        &self.part_bones[part.index()]
    }

    pub fn file(&self) -> &SkeletonFile {
        &self.file
    }

    /// Index of the bone ending at `joint`.
    pub fn bone_of_joint(&self, joint: usize) -> Option<usize> {
        self.bones.iter().position(|b| b.child == joint)
    }

    fn check_joints(&self, n: usize) -> Result<()> {
        if n != self.joint_count() {
            return Err(SkeletonError::DimMismatch { expected: self.joint_count(), got: n });
        }
        Ok(())
    }
}

/// Per-bone unit directions and lengths, indexed like [`SkeletonDef::bones`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoneRepr {
    pub directions: Vec<Vector3<f64>>,
    pub lengths: Vec<f64>,
}

impl BoneRepr {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Un-normalized bone vectors `direction * length`.
    pub fn vectors(&self) -> Vec<Vector3<f64>> {
        self.directions.iter().zip(&self.lengths).map(|(d, l)| d * *l).collect()
    }
}

/// Raw bone vectors `child - parent` of a pose.
pub fn bone_vectors(pose: &Pose3D, skel: &SkeletonDef) -> Result<Vec<Vector3<f64>>> {
    skel.check_joints(pose.len())?;
    Ok(skel.bones().iter().map(|b| pose.joints[b.child] - pose.joints[b.parent]).collect())
}

pub fn to_bones(pose: &Pose3D, skel: &SkeletonDef) -> Result<BoneRepr> {
    let vecs = bone_vectors(pose, skel)?;
    let mut directions = Vec::with_capacity(vecs.len());
    let mut lengths = Vec::with_capacity(vecs.len());
    for (bone, v) in vecs.iter().enumerate() {
        let len = v.norm();
        if !(len >= MIN_BONE_LENGTH) {
            return Err(SkeletonError::ZeroBone { bone });
        }
        directions.push(v / len);
        lengths.push(len);
    }
    Ok(BoneRepr { directions, lengths })
}

/// Forward kinematics from the root at the origin.
pub fn from_bones(bones: &BoneRepr, skel: &SkeletonDef) -> Pose3D {
    assert_eq!(bones.len(), skel.bone_count(), "bone count mismatch");
    let mut joints = vec![Vector3::zeros(); skel.joint_count()];
    for (b, bone) in skel.bones().iter().enumerate() {
        joints[bone.child] = joints[bone.parent] + bones.directions[b] * bones.lengths[b];
    }
    Pose3D::new(joints)
}

pub fn apply_bone_angle(bones: &BoneRepr, deltas: &[Vector3<f64>]) -> Result<BoneRepr> {
    if deltas.len() != bones.len() {
        return Err(SkeletonError::DimMismatch { expected: bones.len(), got: deltas.len() });
    }
    let directions = bones
        .directions
        .iter()
        .zip(deltas)
        .enumerate()
        .map(|(bone, (d, delta))| {
            let u = d + delta;
            let n = u.norm();
            if n < 1e-9 {
                Err(SkeletonError::DegenerateDirection { bone })
            } else {
                Ok(u / n)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoneRepr { directions, lengths: bones.lengths.clone() })
}

pub fn apply_bone_length(bones: &BoneRepr, ratios: &[f64]) -> Result<BoneRepr> {
    if ratios.len() != bones.len() {
        return Err(SkeletonError::DimMismatch { expected: bones.len(), got: ratios.len() });
    }
    if let Some((bone, &ratio)) = ratios.iter().enumerate().find(|(_, r)| !(**r > 0.0)) {
        return Err(SkeletonError::NonPositiveRatio { bone, ratio });
    }
    Ok(BoneRepr {
        directions: bones.directions.clone(),
        lengths: bones.lengths.iter().zip(ratios).map(|(l, r)| l * r).collect(),
    })
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues rotation matrix of an axis-angle vector.
pub fn rotation_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    let theta = axis_angle.norm();
    if theta == 0.0 {
        return Matrix3::identity();
    }
    let k = skew(&(axis_angle / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

pub fn apply_rotation(pose: &Pose3D, axis_angle: &Vector3<f64>) -> Pose3D {
    let r = rotation_matrix(axis_angle);
    Pose3D::new(pose.joints.iter().map(|j| r * j).collect())
}

/// Symmetric `(J-1) x (J-1)` Gram matrix of un-normalized bone vectors (mm²).
#[derive(Debug, Clone, PartialEq)]
pub struct KcsMatrix(pub DMatrix<f64>);

impl KcsMatrix {
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0[(a, b)]
    }
}

/// Gram matrix of an arbitrary list of bone vectors.
pub fn gram(vectors: &[Vector3<f64>]) -> DMatrix<f64> {
    let n = vectors.len();
    DMatrix::from_fn(n, n, |a, b| vectors[a].dot(&vectors[b]))
}

pub fn kcs(pose: &Pose3D, skel: &SkeletonDef) -> Result<KcsMatrix> {
    Ok(KcsMatrix(gram(&bone_vectors(pose, skel)?)))
}

/// Vertical axis of the camera frame (image y grows downward).
pub fn vertical_axis() -> Vector3<f64> {
    Vector3::new(0.0, -1.0, 0.0)
}

pub fn random_rotation_vertical<R: Rng + ?Sized>(pose: &Pose3D, rng: &mut R) -> Pose3D {
    let angle = rng.random::<f64>() * 2.0 * PI;
    apply_rotation(pose, &(vertical_axis() * angle))
}

pub fn random_bone_length<R: Rng + ?Sized>(
    pose: &Pose3D,
    skel: &SkeletonDef,
    rng: &mut R,
    lo: f64,
    hi: f64,
) -> Result<Pose3D> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(SkeletonError::BadRange { lo, hi });
    }
    let bones = to_bones(pose, skel)?;
    let ratios: Vec<f64> = (0..bones.len()).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Ok(from_bones(&apply_bone_length(&bones, &ratios)?, skel))
}
