//! The human-object interaction sequence model and its network-facing
//! feature layout.

use nalgebra::{Rotation3, UnitQuaternion};
use ndarray::{s, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{
    canonical_quat, canonical_rotation, rot6d_from_rotation, rotation_from_rot6d, Vec3,
};

/// Width of the per-frame object feature block: 6D rotation then translation.
pub const OBJECT_FEATURES: usize = 9;
pub const DEFAULT_JOINTS: usize = 21;

/// Joint positions for one frame, in meters, world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanPose {
    pub joints: Vec<Vec3>,
}

impl HumanPose {
    pub fn new(joints: Vec<Vec3>) -> Result<Self> {
        if joints.len() < 2 {
            return Err(Error::InvalidValue(format!(
                "a pose needs at least 2 joints, got {}",
                joints.len()
            )));
        }
        if !joints.iter().all(|j| j.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidValue("non-finite joint coordinate".into()));
        }
        Ok(Self { joints })
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }
}

/// Rigid object pose. The rotation is kept as an orthonormal frame whose
/// third column is the cross product of the first two, so the 6D feature
/// form round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl ObjectPose {
    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical_rotation(&rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vec3::zeros())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self::new(q.to_rotation_matrix(), translation)
    }

    pub fn from_features(f: &[f64]) -> Result<Self> {
        if f.len() != OBJECT_FEATURES {
            return Err(Error::shape("object features", OBJECT_FEATURES, f.len()));
        }
        let r6: [f64; 6] = f[..6].try_into().expect("slice of six");
        let rotation = rotation_from_rot6d(&r6)?;
        let translation = Vec3::new(f[6], f[7], f[8]);
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidValue("non-finite object translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    /// Unit quaternion with non-negative scalar part.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        canonical_quat(UnitQuaternion::from_rotation_matrix(&self.rotation))
    }

    pub fn rot6d(&self) -> [f64; 6] {
        rot6d_from_rotation(&self.rotation)
    }

    pub fn features(&self) -> [f64; OBJECT_FEATURES] {
        let r = self.rot6d();
        let t = self.translation;
        [r[0], r[1], r[2], r[3], r[4], r[5], t.x, t.y, t.z]
    }

    /// Maps a point from the canonical object frame to the world.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Past/future frame split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    #[serde(rename = "H")]
    pub past: usize,
    #[serde(rename = "F")]
    pub future: usize,
}

impl Split {
    pub fn new(past: usize, future: usize) -> Result<Self> {
        if past == 0 || future == 0 {
            return Err(Error::InvalidValue(format!(
                "split needs H >= 1 and F >= 1, got ({past}, {future})"
            )));
        }
        Ok(Self { past, future })
    }

    pub fn total(&self) -> usize {
        self.past + self.future
    }
}

impl Default for Split {
    fn default() -> Self {
        Self {
            past: 10,
            future: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoiSequence {
    pub human: Vec<HumanPose>,
    pub object: Vec<ObjectPose>,
    pub fps: f64,
    pub split: Split,
}

impl HoiSequence {
    pub fn new(
        human: Vec<HumanPose>,
        object: Vec<ObjectPose>,
        fps: f64,
        split: Split,
    ) -> Result<Self> {
        let seq = Self {
            human,
            object,
            fps,
            split,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.human.len() != self.object.len() {
            return Err(Error::shape(
                "sequence object frames",
                self.human.len(),
                self.object.len(),
            ));
        }
        if self.split.past == 0 || self.split.future == 0 {
            return Err(Error::InvalidValue("split needs H >= 1 and F >= 1".into()));
        }
        if self.human.len() != self.split.total() {
            return Err(Error::shape(
                "sequence frames (H + F)",
                self.split.total(),
                self.human.len(),
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::InvalidValue(format!("fps must be positive, got {}", self.fps)));
        }
        let joints = self.joint_count();
        for (i, h) in self.human.iter().enumerate() {
            if h.joint_count() != joints {
                return Err(Error::shape("joints in frame", joints, format!("{} (frame {i})", h.joint_count())));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.human.len()
    }

    pub fn joint_count(&self) -> usize {
        self.human.first().map_or(0, HumanPose::joint_count)
    }

    pub fn feature_width(&self) -> usize {
        feature_width(self.joint_count())
    }

    /// Frames `[start, end)` as a new sequence with the given split.
    pub fn window(&self, start: usize, split: Split) -> Result<HoiSequence> {
        let end = start + split.total();
        if end > self.frames() {
            return Err(Error::shape("window end", format!("<= {}", self.frames()), end));
        }
        HoiSequence::new(
            self.human[start..end].to_vec(),
            self.object[start..end].to_vec(),
            self.fps,
            split,
        )
    }

    /// Network-facing layout: per frame, `J·3` joint coordinates followed by
    /// the 9 object features.
    pub fn flatten(&self) -> Array2<f64> {
        flatten_frames(&self.human, &self.object)
    }

    pub fn unflatten(features: ArrayView2<f64>, joints: usize, fps: f64, split: Split) -> Result<Self> {
        let width = feature_width(joints);
        if features.ncols() != width {
            return Err(Error::shape("feature width", width, features.ncols()));
        }
        let (human, object) = decode_frames(features, joints)?;
        HoiSequence::new(human, object, fps, split)
    }

    /// Future object poses.
    pub fn future_object(&self) -> &[ObjectPose] {
        &self.object[self.split.past..]
    }

    pub fn future_human(&self) -> &[HumanPose] {
        &self.human[self.split.past..]
    }
}

/// Flattens paired frames into the network layout; lengths must match.
pub fn flatten_frames(human: &[HumanPose], object: &[ObjectPose]) -> Array2<f64> {
    let joints = human.first().map_or(0, HumanPose::joint_count);
    let mut out = Array2::zeros((human.len().min(object.len()), feature_width(joints)));
    for (i, (h, o)) in human.iter().zip(object).enumerate() {
        let mut row = out.row_mut(i);
        write_frame(&mut row, h, o);
    }
    out
}

pub fn feature_width(joints: usize) -> usize {
    joints * 3 + OBJECT_FEATURES
}

fn write_frame(row: &mut ndarray::ArrayViewMut1<f64>, h: &HumanPose, o: &ObjectPose) {
    for (j, p) in h.joints.iter().enumerate() {
        row[3 * j] = p.x;
        row[3 * j + 1] = p.y;
        row[3 * j + 2] = p.z;
    }
    let base = h.joints.len() * 3;
    for (k, v) in o.features().iter().enumerate() {
        row[base + k] = *v;
    }
}

pub(crate) fn decode_human(row: ArrayView1<f64>, joints: usize) -> Result<HumanPose> {
    HumanPose::new(
        (0..joints)
            .map(|j| Vec3::new(row[3 * j], row[3 * j + 1], row[3 * j + 2]))
            .collect(),
    )
}

pub(crate) fn decode_object(row: ArrayView1<f64>, joints: usize) -> Result<ObjectPose> {
    let base = joints * 3;
    let f = row.slice(s![base..base + OBJECT_FEATURES]).to_vec();
    ObjectPose::from_features(&f)
}

/// Decodes feature rows into poses without checking a split.
pub fn decode_frames(
    features: ArrayView2<f64>,
    joints: usize,
) -> Result<(Vec<HumanPose>, Vec<ObjectPose>)> {
    let width = feature_width(joints);
    if features.ncols() != width {
        return Err(Error::shape("feature width", width, features.ncols()));
    }
    let mut human = Vec::with_capacity(features.nrows());
    let mut object = Vec::with_capacity(features.nrows());
    for row in features.rows() {
        human.push(decode_human(row, joints)?);
        object.push(decode_object(row, joints)?);
    }
    Ok((human, object))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_sequence(joints: usize, split: Split) -> HoiSequence {
        let n = split.total();
        HoiSequence::new(
            vec![HumanPose::new(vec![Vec3::zeros(); joints]).unwrap(); n],
            vec![ObjectPose::identity(); n],
            30.0,
            split,
        )
        .unwrap()
    }

    #[test]
    fn default_width_is_72() {
        assert_eq!(feature_width(DEFAULT_JOINTS), 72);
    }

    #[test]
    fn zero_human_identity_object_layout() {
        let seq = zero_sequence(21, Split::new(1, 1).unwrap());
        let f = seq.flatten();
        let row = f.row(0);
        assert!(row.iter().take(63).all(|&v| v == 0.0));
        let tail: Vec<f64> = row.iter().skip(63).copied().collect();
        assert_eq!(tail, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_width_names_both_sizes() {
        let f = Array2::<f64>::zeros((2, 70));
        let err = HoiSequence::unflatten(f.view(), 21, 30.0, Split::new(1, 1).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("72") && msg.contains("70"), "{msg}");
    }

    #[test]
    fn frame_count_must_match_split() {
        let seq = zero_sequence(3, Split::new(2, 2).unwrap());
        let bad = HoiSequence::new(seq.human.clone(), seq.object.clone(), 30.0, Split::new(2, 3).unwrap());
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip_is_exact(
            seed in any::<u64>(),
            joints in 2usize..8,
            past in 1usize..4,
            future in 1usize..4,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let split = Split::new(past, future).unwrap();
            let human = (0..split.total())
                .map(|_| HumanPose::new((0..joints).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()).unwrap())
                .collect();
            let object = (0..split.total())
                .map(|_| {
                    let q = UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
                    ObjectPose::from_quaternion(q, Vec3::new(rng.random(), rng.random(), rng.random()))
                })
                .collect();
            let seq = HoiSequence::new(human, object, 30.0, split).unwrap();
            let back = HoiSequence::unflatten(seq.flatten().view(), joints, 30.0, split).unwrap();
            prop_assert_eq!(&back, &seq);
            prop_assert_eq!(back.flatten(), seq.flatten());
        }
    }
}
