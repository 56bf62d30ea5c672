//! Contact and penetration sensing on a (possibly denoised) interaction, and
//! reference-system selection.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::body::{body_sdf, marker_positions, BodyProxy};
use crate::error::{Error, Result};
use crate::rotation::Vec3;
use crate::shape::ObjectShape;
use crate::types::{HumanPose, ObjectPose};

/// Which body points act as contact points and reference anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContactMode {
    /// Surface markers against the full object point cloud.
    #[default]
    Marker,
    /// Skeleton joints against the object keypoints.
    Joint,
}

impl ContactMode {
    pub fn point_count(&self, body: &BodyProxy) -> usize {
        match self {
            ContactMode::Marker => body.markers.len(),
            ContactMode::Joint => body.skeleton.joint_count(),
        }
    }
}

pub fn contact_points(pose: &HumanPose, body: &BodyProxy, mode: ContactMode) -> Vec<Vec3> {
    match mode {
        ContactMode::Marker => marker_positions(pose, &body.skeleton, &body.markers),
        ContactMode::Joint => pose.joints.clone(),
    }
}

/// Object points used for contact in `mode`, posed in the world.
pub fn object_points(shape: &ObjectShape, pose: &ObjectPose, mode: ContactMode) -> Vec<Vec3> {
    match mode {
        ContactMode::Marker => shape.posed(pose),
        ContactMode::Joint => shape.posed_keypoints(pose),
    }
}

/// Per frame and contact point, the distance to the nearest object point.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactState {
    pub distances: Array2<f64>,
}

impl ContactState {
    pub fn frames(&self) -> usize {
        self.distances.nrows()
    }

    pub fn points(&self) -> usize {
        self.distances.ncols()
    }

    /// l2 norm of each contact point's distance track over frames.
    pub fn column_norms(&self) -> Vec<f64> {
        self.distances
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// `min_j ‖C[j]‖` and the lowest index attaining it.
    pub fn min_norm(&self) -> (usize, f64) {
        self.column_norms()
            .into_iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (j, n)| if n < best.1 { (j, n) } else { best })
    }

    /// A per-frame distance threshold expressed on the l2-over-frames scale.
    pub fn scaled_threshold(&self, per_frame: f64) -> f64 {
        per_frame * (self.frames() as f64).sqrt()
    }
}

/// Per-frame summed penetration depth of object points inside the body.
#[derive(Debug, Clone, PartialEq)]
pub struct PenetrationState {
    pub per_frame: Vec<f64>,
}

impl PenetrationState {
    pub fn norm(&self) -> f64 {
        self.per_frame.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn contact_state(
    human: &[HumanPose],
    object: &[ObjectPose],
    shape: &ObjectShape,
    body: &BodyProxy,
    mode: ContactMode,
) -> Result<ContactState> {
    if shape.is_empty() {
        return Err(Error::EmptyPointCloud("contact_state"));
    }
    if mode == ContactMode::Joint && shape.keypoints.is_empty() {
        return Err(Error::EmptyPointCloud("contact_state keypoints"));
    }
    if human.is_empty() {
        return Err(Error::InvalidValue("contact_state needs at least one frame".into()));
    }
    if human.len() != object.len() {
        return Err(Error::shape("contact_state frames", human.len(), object.len()));
    }
    let count = mode.point_count(body);
    let mut distances = Array2::zeros((human.len(), count));
    for (i, (h, o)) in human.iter().zip(object).enumerate() {
        let points = contact_points(h, body, mode);
        let cloud = object_points(shape, o, mode);
        for (j, p) in points.iter().enumerate() {
            distances[(i, j)] = nearest_distance(p, &cloud);
        }
    }
    Ok(ContactState { distances })
}

pub(crate) fn nearest_distance(p: &Vec3, cloud: &[Vec3]) -> f64 {
    cloud
        .iter()
        .map(|q| (p - q).norm_squared())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

pub fn penetration_state(
    human: &[HumanPose],
    object: &[ObjectPose],
    shape: &ObjectShape,
    body: &BodyProxy,
) -> Result<PenetrationState> {
    if shape.is_empty() {
        return Err(Error::EmptyPointCloud("penetration_state"));
    }
    if human.len() != object.len() {
        return Err(Error::shape("penetration_state frames", human.len(), object.len()));
    }
    let per_frame = human
        .iter()
        .zip(object)
        .map(|(h, o)| {
            shape
                .posed(o)
                .iter()
                .map(|p| -body_sdf(h, &body.skeleton, p).min(0.0))
                .sum()
        })
        .collect();
    Ok(PenetrationState { per_frame })
}

/// Reference system: the ground (world) frame or a contact point's frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "i64", into = "i64")]
pub enum ReferenceChoice {
    Ground,
    Point(usize),
}

impl ReferenceChoice {
    /// `-1` for ground, otherwise the contact-point index.
    pub fn index(&self) -> i64 {
        match self {
            ReferenceChoice::Ground => -1,
            ReferenceChoice::Point(j) => *j as i64,
        }
    }

    /// Graph node holding this reference system's features.
    pub fn node(&self) -> usize {
        match self {
            ReferenceChoice::Ground => 0,
            ReferenceChoice::Point(j) => j + 1,
        }
    }

    pub fn from_index(s: i64, count: usize) -> Result<Self> {
        match s {
            -1 => Ok(ReferenceChoice::Ground),
            j if j >= 0 && (j as usize) < count => Ok(ReferenceChoice::Point(j as usize)),
            _ => Err(Error::Index {
                index: s,
                valid: format!("-1..{count}"),
            }),
        }
    }
}

impl From<i64> for ReferenceChoice {
    fn from(s: i64) -> Self {
        if s < 0 {
            ReferenceChoice::Ground
        } else {
            ReferenceChoice::Point(s as usize)
        }
    }
}

impl From<ReferenceChoice> for i64 {
    fn from(r: ReferenceChoice) -> i64 {
        r.index()
    }
}

/// Ground if no contact point comes within `eps_contact` (per frame, scaled
/// to the l2-over-frames norm); otherwise the closest contact point, lowest
/// index on ties.
pub fn select_reference(c: &ContactState, eps_contact: f64) -> ReferenceChoice {
    let (j, n) = c.min_norm();
    if n >= c.scaled_threshold(eps_contact) {
        ReferenceChoice::Ground
    } else {
        ReferenceChoice::Point(j)
    }
}
