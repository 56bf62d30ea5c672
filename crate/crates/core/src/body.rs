//! Articulated body proxy: skeleton forward kinematics, surface markers and a
//! capsule-union signed distance field.
//!
//! Poses carry joint positions only, so bone frames are rebuilt from
//! positions: the bone direction plus a body-attached reference axis (the
//! hip-to-hip lateral axis or the pelvis-to-neck up axis, whichever is less
//! aligned with the bone at rest). Everything is therefore equivariant under
//! rigid motion of the whole body.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::Vec3;
use crate::types::HumanPose;

/// Body axis used to fix the twist of a bone frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwistRef {
    Lateral,
    Up,
}

/// Joints that define the body axes: lateral = left − right, up = top − root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyAxes {
    pub left: usize,
    pub right: usize,
    pub top: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SkeletonDef")]
pub struct Skeleton {
    /// Parent per joint; the root (joint 0) has `-1`. Parents precede children.
    pub parents: Vec<i32>,
    /// Offset of each joint from its parent in the parent's rest frame; for
    /// the root, its rest position.
    pub rest_offsets: Vec<Vec3>,
    /// Capsule radius per bone. Bone `b` joins joint `b + 1` to its parent.
    pub capsule_radii: Vec<f64>,
    pub axes: BodyAxes,
    #[serde(default)]
    pub names: Vec<String>,
    #[serde(skip)]
    twist: Vec<TwistRef>,
}

#[derive(Deserialize)]
struct SkeletonDef {
    parents: Vec<i32>,
    rest_offsets: Vec<Vec3>,
    capsule_radii: Vec<f64>,
    axes: BodyAxes,
    #[serde(default)]
    names: Vec<String>,
}

impl TryFrom<SkeletonDef> for Skeleton {
    type Error = Error;

    fn try_from(d: SkeletonDef) -> Result<Self> {
        Skeleton::new(d.parents, d.rest_offsets, d.capsule_radii, d.axes, d.names)
    }
}

/// Local joint rotations plus a root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAngles {
    pub root_translation: Vec3,
    pub rotations: Vec<UnitQuaternion<f64>>,
}

impl JointAngles {
    pub fn identity(joints: usize) -> Self {
        Self {
            root_translation: Vec3::zeros(),
            rotations: vec![UnitQuaternion::identity(); joints],
        }
    }
}

impl Skeleton {
    pub fn new(
        parents: Vec<i32>,
        rest_offsets: Vec<Vec3>,
        capsule_radii: Vec<f64>,
        axes: BodyAxes,
        names: Vec<String>,
    ) -> Result<Self> {
        let mut sk = Self {
            parents,
            rest_offsets,
            capsule_radii,
            axes,
            names,
            twist: Vec::new(),
        };
        sk.finish()?;
        Ok(sk)
    }

    /// Validates the topology and derives per-bone twist references.
    fn finish(&mut self) -> Result<()> {
        let n = self.parents.len();
        if n < 2 {
            return Err(Error::InvalidValue("skeleton needs at least 2 joints".into()));
        }
        if self.rest_offsets.len() != n {
            return Err(Error::shape("rest offsets", n, self.rest_offsets.len()));
        }
        if self.capsule_radii.len() != n - 1 {
            return Err(Error::shape("capsule radii", n - 1, self.capsule_radii.len()));
        }
        if self.parents[0] != -1 {
            return Err(Error::InvalidValue("joint 0 must be the root".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::InvalidValue(format!(
                    "joint {j} has parent {p}; parents must precede children"
                )));
            }
        }
        if !self.rest_offsets.iter().all(|o| o.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidValue("non-finite rest offset".into()));
        }
        if self.rest_offsets.iter().skip(1).any(|o| o.norm() <= 0.0) {
            return Err(Error::InvalidValue("bone lengths must be positive".into()));
        }
        if !self.capsule_radii.iter().all(|r| r.is_finite() && *r > 0.0) {
            return Err(Error::InvalidValue("capsule radii must be positive".into()));
        }
        let BodyAxes { left, right, top } = self.axes;
        if left.max(right).max(top) >= n || left == right || top == 0 {
            return Err(Error::InvalidValue("invalid body axis joints".into()));
        }

        let rest = forward_kinematics(self, &JointAngles::identity(n))?;
        let lat_raw = rest.joints[left] - rest.joints[right];
        let up_raw = rest.joints[top] - rest.joints[0];
        if lat_raw.norm() < 1e-9 || lat_raw.normalize().cross(&up_raw).norm() < 1e-9 {
            return Err(Error::InvalidValue(
                "body axes are degenerate in the rest pose".into(),
            ));
        }
        let (lateral, up) = body_axes(self, &rest);
        self.twist = (1..n)
            .map(|j| {
                let dir = (rest.joints[j] - rest.joints[self.parent(j)]).normalize();
                if dir.dot(&lateral).abs() <= dir.dot(&up).abs() {
                    TwistRef::Lateral
                } else {
                    TwistRef::Up
                }
            })
            .collect();
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn bone_count(&self) -> usize {
        self.parents.len() - 1
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parents[joint] as usize
    }

    /// Endpoints (parent, child) of bone `b`.
    pub fn bone_joints(&self, b: usize) -> (usize, usize) {
        (self.parent(b + 1), b + 1)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Checks that `pose` is consistent with this topology.
    pub fn check_pose(&self, pose: &HumanPose) -> Result<()> {
        if pose.joint_count() != self.joint_count() {
            return Err(Error::shape("pose joints", self.joint_count(), pose.joint_count()));
        }
        for b in 0..self.bone_count() {
            let (p, c) = self.bone_joints(b);
            if (pose.joints[c] - pose.joints[p]).norm() <= 0.0 {
                return Err(Error::InvalidValue(format!("bone {b} has zero length")));
            }
        }
        Ok(())
    }

    /// Rotation of bone `b`'s local frame: x along the bone, y from the twist
    /// reference, z = x × y.
    pub fn bone_frame(&self, pose: &HumanPose, b: usize) -> Rotation3<f64> {
        let (lateral, up) = body_axes(self, pose);
        self.bone_frame_with_axes(pose, b, &lateral, &up)
    }

    fn bone_frame_with_axes(&self, pose: &HumanPose, b: usize, lateral: &Vec3, up: &Vec3) -> Rotation3<f64> {
        let (p, c) = self.bone_joints(b);
        let x = (pose.joints[c] - pose.joints[p]).normalize();
        let (first, second) = match self.twist.get(b).copied().unwrap_or(TwistRef::Lateral) {
            TwistRef::Lateral => (lateral, up),
            TwistRef::Up => (up, lateral),
        };
        let mut y = first - x * x.dot(first);
        if y.norm() < 1e-6 {
            y = second - x * x.dot(second);
        }
        let y = y.normalize();
        let z = x.cross(&y);
        Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]))
    }
}

/// Lateral and up axes of a pose (unit, orthogonalized).
fn body_axes(sk: &Skeleton, pose: &HumanPose) -> (Vec3, Vec3) {
    let BodyAxes { left, right, top } = sk.axes;
    let lateral = (pose.joints[left] - pose.joints[right]).normalize();
    let up_raw = pose.joints[top] - pose.joints[0];
    let up = (up_raw - lateral * lateral.dot(&up_raw)).normalize();
    (lateral, up)
}

/// Global joint positions from local rotations. Joint `j`'s global frame is
/// its parent's frame composed with the rest offset and then the local
/// rotation.
pub fn forward_kinematics(sk: &Skeleton, angles: &JointAngles) -> Result<HumanPose> {
    Ok(forward_kinematics_frames(sk, angles)?.0)
}

/// Like [`forward_kinematics`] but also returns each joint's global rotation.
pub fn forward_kinematics_frames(
    sk: &Skeleton,
    angles: &JointAngles,
) -> Result<(HumanPose, Vec<UnitQuaternion<f64>>)> {
    let n = sk.joint_count();
    if angles.rotations.len() != n {
        return Err(Error::shape("joint angles", n, angles.rotations.len()));
    }
    let mut pos = Vec::with_capacity(n);
    let mut rot: Vec<UnitQuaternion<f64>> = Vec::with_capacity(n);
    pos.push(angles.root_translation + sk.rest_offsets[0]);
    rot.push(angles.rotations[0]);
    for j in 1..n {
        let p = sk.parent(j);
        pos.push(pos[p] + rot[p] * sk.rest_offsets[j]);
        rot.push(rot[p] * angles.rotations[j]);
    }
    Ok((HumanPose::new(pos)?, rot))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub bone: usize,
    /// Position along the bone, 0 at the parent joint and 1 at the child.
    pub along: f64,
    /// Offset in the bone's local frame.
    pub offset: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub markers: Vec<Marker>,
}

impl MarkerSet {
    pub fn new(sk: &Skeleton, markers: Vec<Marker>) -> Result<Self> {
        if markers.is_empty() {
            return Err(Error::InvalidValue("marker set must not be empty".into()));
        }
        for (i, m) in markers.iter().enumerate() {
            if m.bone >= sk.bone_count() {
                return Err(Error::Index {
                    index: m.bone as i64,
                    valid: format!("bones 0..{} (marker {i})", sk.bone_count()),
                });
            }
            if !(0.0..=1.0).contains(&m.along) {
                return Err(Error::InvalidValue(format!("marker {i}: along must be in [0, 1]")));
            }
        }
        Ok(Self { markers })
    }

    /// Places markers on capsule surfaces: each placement is (bone, along, world
    /// direction at rest). The direction's component perpendicular to the
    /// bone is scaled to the capsule radius.
    pub fn on_surface(sk: &Skeleton, placements: &[(usize, f64, Vec3)]) -> Result<Self> {
        let rest = forward_kinematics(sk, &JointAngles::identity(sk.joint_count()))?;
        let markers = placements
            .iter()
            .map(|&(bone, along, dir)| {
                let frame = sk.bone_frame(&rest, bone);
                let x = frame.matrix().column(0).into_owned();
                let perp = dir - x * x.dot(&dir);
                let world = perp.normalize() * sk.capsule_radii[bone];
                Marker {
                    bone,
                    along,
                    offset: frame.inverse() * world,
                }
            })
            .collect();
        Self::new(sk, markers)
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }
}

/// Skeleton plus markers: everything needed to sense contact and penetration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyProxy {
    pub skeleton: Skeleton,
    pub markers: MarkerSet,
}

impl BodyProxy {
    pub fn new(skeleton: Skeleton, markers: MarkerSet) -> Self {
        Self { skeleton, markers }
    }

    /// The default 21-joint humanoid with 16 surface markers.
    pub fn default_humanoid() -> Self {
        let skeleton = default_skeleton();
        let markers = default_markers(&skeleton);
        Self { skeleton, markers }
    }

    pub fn sdf(&self, pose: &HumanPose, query: &Vec3) -> f64 {
        body_sdf(pose, &self.skeleton, query)
    }
}

pub fn marker_positions(pose: &HumanPose, sk: &Skeleton, markers: &MarkerSet) -> Vec<Vec3> {
    let (lateral, up) = body_axes(sk, pose);
    markers
        .markers
        .iter()
        .map(|m| {
            let (p, c) = sk.bone_joints(m.bone);
            let frame = sk.bone_frame_with_axes(pose, m.bone, &lateral, &up);
            pose.joints[p] + (pose.joints[c] - pose.joints[p]) * m.along + frame * m.offset
        })
        .collect()
}

/// Rotation of each marker's bone frame.
pub fn marker_frames(pose: &HumanPose, sk: &Skeleton, markers: &MarkerSet) -> Vec<Rotation3<f64>> {
    let (lateral, up) = body_axes(sk, pose);
    markers
        .markers
        .iter()
        .map(|m| sk.bone_frame_with_axes(pose, m.bone, &lateral, &up))
        .collect()
}

/// Frame attached to each joint: the frame of the bone ending at it, or the
/// body frame for the root.
pub fn joint_frames(pose: &HumanPose, sk: &Skeleton) -> Vec<Rotation3<f64>> {
    let (lateral, up) = body_axes(sk, pose);
    let mut out = Vec::with_capacity(sk.joint_count());
    let fwd = lateral.cross(&up);
    out.push(Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[lateral, up, fwd])));
    for b in 0..sk.bone_count() {
        out.push(sk.bone_frame_with_axes(pose, b, &lateral, &up));
    }
    out
}

/// Distance from `p` to the segment `[a, b]`.
pub fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&d) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + d * t)).norm()
}

/// Signed distance to the union of bone capsules; negative inside.
pub fn body_sdf(pose: &HumanPose, sk: &Skeleton, query: &Vec3) -> f64 {
    (0..sk.bone_count())
        .map(|b| {
            let (p, c) = sk.bone_joints(b);
            segment_distance(query, &pose.joints[p], &pose.joints[c]) - sk.capsule_radii[b]
        })
        .fold(f64::INFINITY, f64::min)
}

pub mod joints {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const L_FOOT: usize = 9;
    pub const R_FOOT: usize = 10;
    pub const NECK: usize = 11;
    pub const HEAD: usize = 12;
    pub const L_COLLAR: usize = 13;
    pub const R_COLLAR: usize = 14;
    pub const L_SHOULDER: usize = 15;
    pub const R_SHOULDER: usize = 16;
    pub const L_ELBOW: usize = 17;
    pub const R_ELBOW: usize = 18;
    pub const L_WRIST: usize = 19;
    pub const R_WRIST: usize = 20;
}

/// 21-joint humanoid, y up, +x to the body's left, +z forward.
pub fn default_skeleton() -> Skeleton {
    use joints::*;
    let table: [(&str, i32, [f64; 3], f64); 21] = [
        ("pelvis", -1, [0.0, 0.95, 0.0], 0.0),
        ("l_hip", PELVIS as i32, [0.09, -0.06, 0.0], 0.08),
        ("r_hip", PELVIS as i32, [-0.09, -0.06, 0.0], 0.08),
        ("spine1", PELVIS as i32, [0.0, 0.12, 0.0], 0.12),
        ("l_knee", L_HIP as i32, [0.0, -0.40, 0.0], 0.075),
        ("r_knee", R_HIP as i32, [0.0, -0.40, 0.0], 0.075),
        ("spine2", SPINE1 as i32, [0.0, 0.14, 0.0], 0.12),
        ("l_ankle", L_KNEE as i32, [0.0, -0.40, 0.0], 0.055),
        ("r_ankle", R_KNEE as i32, [0.0, -0.40, 0.0], 0.055),
        ("l_foot", L_ANKLE as i32, [0.0, -0.06, 0.12], 0.04),
        ("r_foot", R_ANKLE as i32, [0.0, -0.06, 0.12], 0.04),
        ("neck", SPINE2 as i32, [0.0, 0.22, 0.0], 0.11),
        ("head", NECK as i32, [0.0, 0.14, 0.02], 0.09),
        ("l_collar", SPINE2 as i32, [0.07, 0.17, 0.0], 0.06),
        ("r_collar", SPINE2 as i32, [-0.07, 0.17, 0.0], 0.06),
        ("l_shoulder", L_COLLAR as i32, [0.10, 0.0, 0.0], 0.05),
        ("r_shoulder", R_COLLAR as i32, [-0.10, 0.0, 0.0], 0.05),
        ("l_elbow", L_SHOULDER as i32, [0.0, -0.27, 0.0], 0.045),
        ("r_elbow", R_SHOULDER as i32, [0.0, -0.27, 0.0], 0.045),
        ("l_wrist", L_ELBOW as i32, [0.0, -0.25, 0.0], 0.035),
        ("r_wrist", R_ELBOW as i32, [0.0, -0.25, 0.0], 0.035),
    ];
    Skeleton::new(
        table.iter().map(|t| t.1).collect(),
        table.iter().map(|t| Vec3::from(t.2)).collect(),
        table.iter().skip(1).map(|t| t.3).collect(),
        BodyAxes {
            left: L_HIP,
            right: R_HIP,
            top: NECK,
        },
        table.iter().map(|t| t.0.to_string()).collect(),
    )
    .expect("default skeleton is valid")
}

/// Bone index whose child is `joint`.
pub fn bone_of(joint: usize) -> usize {
    joint - 1
}

/// Marker indices on the default humanoid that sit near the hands.
pub const HAND_MARKERS: [usize; 4] = [0, 1, 2, 3];

fn default_markers(sk: &Skeleton) -> MarkerSet {
    use joints::*;
    let fwd = Vec3::z();
    let placements = [
        (bone_of(L_WRIST), 0.95, fwd),
        (bone_of(R_WRIST), 0.95, fwd),
        (bone_of(L_WRIST), 0.95, -Vec3::x()),
        (bone_of(R_WRIST), 0.95, Vec3::x()),
        (bone_of(L_ELBOW), 0.5, Vec3::x()),
        (bone_of(R_ELBOW), 0.5, -Vec3::x()),
        (bone_of(NECK), 0.4, fwd),
        (bone_of(NECK), 0.4, -fwd),
        (bone_of(SPINE2), 0.5, fwd),
        (bone_of(HEAD), 0.8, fwd),
        (bone_of(L_KNEE), 0.5, fwd),
        (bone_of(R_KNEE), 0.5, fwd),
        (bone_of(L_ANKLE), 0.5, fwd),
        (bone_of(R_ANKLE), 0.5, fwd),
        (bone_of(L_FOOT), 0.6, Vec3::y()),
        (bone_of(R_FOOT), 0.6, Vec3::y()),
    ];
    MarkerSet::on_surface(sk, &placements).expect("default markers are valid")
}
