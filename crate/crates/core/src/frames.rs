//! Object motion re-expressed in contact-anchored reference systems, and the
//! spatial-temporal graph stacking all of them.

use nalgebra::Rotation3;
use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::body::{joint_frames, marker_frames, marker_positions, BodyProxy};
use crate::error::{Error, Result};
use crate::geometry::{ContactMode, ReferenceChoice};
use crate::rotation::Vec3;
use crate::types::{HumanPose, ObjectPose, OBJECT_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMode {
    /// Relative translation only; rotations stay in world orientation.
    #[default]
    TranslationOnly,
    /// Translation and rotation expressed in the anchor's bone frame.
    BoneFrame,
}

fn check_lengths(
    object: usize,
    anchor: &[Vec3],
    mode: OrientationMode,
    frames: Option<&[Rotation3<f64>]>,
) -> Result<()> {
    if anchor.len() != object {
        return Err(Error::shape("anchor track frames", object, anchor.len()));
    }
    match (mode, frames) {
        (OrientationMode::BoneFrame, None) => Err(Error::InvalidValue(
            "bone_frame mode needs per-frame bone rotations".into(),
        )),
        (OrientationMode::BoneFrame, Some(f)) if f.len() != object => {
            Err(Error::shape("bone frame track frames", object, f.len()))
        }
        _ => Ok(()),
    }
}

/// World-frame object motion expressed relative to an anchor track.
pub fn to_reference(
    object: &[ObjectPose],
    anchor: &[Vec3],
    mode: OrientationMode,
    bone_frames: Option<&[Rotation3<f64>]>,
) -> Result<Vec<ObjectPose>> {
    check_lengths(object.len(), anchor, mode, bone_frames)?;
    Ok(object
        .iter()
        .zip(anchor)
        .enumerate()
        .map(|(i, (o, a))| match mode {
            OrientationMode::TranslationOnly => ObjectPose::new(*o.rotation(), o.translation - a),
            OrientationMode::BoneFrame => {
                let inv = bone_frames.expect("checked")[i].inverse();
                ObjectPose::new(inv * o.rotation(), inv * (o.translation - a))
            }
        })
        .collect())
}

/// Inverse of [`to_reference`].
pub fn from_reference(
    relative: &[ObjectPose],
    anchor: &[Vec3],
    mode: OrientationMode,
    bone_frames: Option<&[Rotation3<f64>]>,
) -> Result<Vec<ObjectPose>> {
    check_lengths(relative.len(), anchor, mode, bone_frames)?;
    Ok(relative
        .iter()
        .zip(anchor)
        .enumerate()
        .map(|(i, (o, a))| match mode {
            OrientationMode::TranslationOnly => ObjectPose::new(*o.rotation(), o.translation + a),
            OrientationMode::BoneFrame => {
                let r = bone_frames.expect("checked")[i];
                ObjectPose::new(r * o.rotation(), r * o.translation + a)
            }
        })
        .collect())
}

/// Per-frame positions and frames of every contact point.
#[derive(Debug, Clone)]
pub struct AnchorTracks {
    /// `positions[frame][point]`
    pub positions: Vec<Vec<Vec3>>,
    pub frames: Vec<Vec<Rotation3<f64>>>,
}

impl AnchorTracks {
    pub fn compute(human: &[HumanPose], body: &BodyProxy, mode: ContactMode) -> Self {
        let (positions, frames) = human
            .iter()
            .map(|h| match mode {
                ContactMode::Marker => (
                    marker_positions(h, &body.skeleton, &body.markers),
                    marker_frames(h, &body.skeleton, &body.markers),
                ),
                ContactMode::Joint => (h.joints.clone(), joint_frames(h, &body.skeleton)),
            })
            .unzip();
        Self { positions, frames }
    }

    pub fn points(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn track(&self, point: usize) -> Vec<Vec3> {
        self.positions.iter().map(|f| f[point]).collect()
    }

    pub fn frame_track(&self, point: usize) -> Vec<Rotation3<f64>> {
        self.frames.iter().map(|f| f[point]).collect()
    }

    /// Maps a relative track for `reference` back to the world.
    pub fn to_world(
        &self,
        relative: &[ObjectPose],
        reference: ReferenceChoice,
        mode: OrientationMode,
    ) -> Result<Vec<ObjectPose>> {
        match reference {
            ReferenceChoice::Ground => Ok(relative.to_vec()),
            ReferenceChoice::Point(j) => {
                if j >= self.points() {
                    return Err(Error::Index {
                        index: j as i64,
                        valid: format!("-1..{}", self.points()),
                    });
                }
                let frames = self.frame_track(j);
                from_reference(relative, &self.track(j), mode, Some(&frames))
            }
        }
    }
}

/// Object motion under the ground system (node 0) and every contact point
/// (node j + 1). Shape `(frames, 1 + points, 9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StGraph {
    pub features: Array3<f64>,
}

impl StGraph {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn node(&self, n: usize) -> ArrayView2<'_, f64> {
        self.features.index_axis(ndarray::Axis(1), n)
    }

    /// Decodes one node's feature track into poses.
    pub fn node_poses(&self, n: usize) -> Result<Vec<ObjectPose>> {
        self.node(n)
            .rows()
            .into_iter()
            .map(|r| ObjectPose::from_features(&r.to_vec()))
            .collect()
    }
}

pub fn build_st_graph(
    human: &[HumanPose],
    object: &[ObjectPose],
    body: &BodyProxy,
    contact: ContactMode,
    orientation: OrientationMode,
) -> Result<StGraph> {
    if human.is_empty() {
        return Err(Error::InvalidValue("graph needs at least one frame".into()));
    }
    if human.len() != object.len() {
        return Err(Error::shape("graph frames", human.len(), object.len()));
    }
    let anchors = AnchorTracks::compute(human, body, contact);
    let nodes = 1 + anchors.points();
    let mut features = Array3::zeros((human.len(), nodes, OBJECT_FEATURES));
    for (i, o) in object.iter().enumerate() {
        for (k, v) in o.features().iter().enumerate() {
            features[(i, 0, k)] = *v;
        }
    }
    for j in 0..anchors.points() {
        let frames = anchors.frame_track(j);
        let rel = to_reference(object, &anchors.track(j), orientation, Some(&frames))?;
        for (i, o) in rel.iter().enumerate() {
            for (k, v) in o.features().iter().enumerate() {
                features[(i, j + 1, k)] = *v;
            }
        }
    }
    Ok(StGraph { features })
}
