//! Sampling in a per-clip canonical frame: past motion is moved so the last
//! past root sits over the origin (optionally facing +z), sampled there, and
//! mapped back.

use nalgebra::{Rotation3, Vector3};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::body::BodyProxy;
use crate::corrector::{CorrectionRecord, Corrector, CorrectorConfig, ElementContext, InteractionModel, Scheduler};
use crate::data::norm::NormStats;
use crate::data::Clip;
use crate::diffusion::{sample_with_correction, CorrectionHook, Condition, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rotation::Vec3;
use crate::shape::ObjectShape;
use crate::types::{decode_frames, flatten_frames, HoiSequence, HumanPose, ObjectPose, Split};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CanonicalConfig {
    pub yaw_align: bool,
}

impl Default for CanonicalConfig {
    fn default() -> Self {
        Self { yaw_align: true }
    }
}

/// Rigid map `p ↦ R (p − origin)` with `R` a rotation about +y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Canonical {
    pub rotation: Rotation3<f64>,
    pub origin: Vec3,
}

impl Canonical {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            origin: Vec3::zeros(),
        }
    }

    /// Origin below the root of `pose`; with `yaw_align` the body's forward
    /// direction (lateral × up) is turned onto +z.
    pub fn fit(pose: &HumanPose, body: &BodyProxy, yaw_align: bool) -> Self {
        let root = pose.joints[0];
        let origin = Vec3::new(root.x, 0.0, root.z);
        let mut rotation = Rotation3::identity();
        if yaw_align {
            let axes = body.skeleton.axes;
            let lateral = pose.joints[axes.left] - pose.joints[axes.right];
            let up = pose.joints[axes.top] - root;
            let forward = lateral.cross(&up);
            if forward.x.hypot(forward.z) > 1e-9 {
                rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), (-forward.x).atan2(forward.z));
            }
        }
        Self { rotation, origin }
    }

    pub fn point(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.origin)
    }

    pub fn point_back(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse() * p + self.origin
    }

    pub fn human(&self, h: &HumanPose) -> HumanPose {
        HumanPose {
            joints: h.joints.iter().map(|p| self.point(p)).collect(),
        }
    }

    pub fn human_back(&self, h: &HumanPose) -> HumanPose {
        HumanPose {
            joints: h.joints.iter().map(|p| self.point_back(p)).collect(),
        }
    }

    pub fn object(&self, o: &ObjectPose) -> ObjectPose {
        ObjectPose::new(self.rotation * o.rotation(), self.point(&o.translation))
    }

    pub fn object_back(&self, o: &ObjectPose) -> ObjectPose {
        ObjectPose::new(self.rotation.inverse() * o.rotation(), self.point_back(&o.translation))
    }

    pub fn apply(&self, seq: &HoiSequence) -> Result<HoiSequence> {
        HoiSequence::new(
            seq.human.iter().map(|h| self.human(h)).collect(),
            seq.object.iter().map(|o| self.object(o)).collect(),
            seq.fps,
            seq.split,
        )
    }

    pub fn invert(&self, seq: &HoiSequence) -> Result<HoiSequence> {
        HoiSequence::new(
            seq.human.iter().map(|h| self.human_back(h)).collect(),
            seq.object.iter().map(|o| self.object_back(o)).collect(),
            seq.fps,
            seq.split,
        )
    }
}

/// Canonicalizes a window using its last past frame.
pub fn canonicalize(seq: &HoiSequence, body: &BodyProxy, config: CanonicalConfig) -> Result<(HoiSequence, Canonical)> {
    let c = Canonical::fit(&seq.human[seq.split.past - 1], body, config.yaw_align);
    Ok((c.apply(seq)?, c))
}

/// Past frames plus the object shape: everything a sampler may look at.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub human: Vec<HumanPose>,
    pub object: Vec<ObjectPose>,
    pub shape: ObjectShape,
    pub fps: f64,
}

impl SampleRequest {
    /// The past `H` frames of a clip.
    pub fn from_clip(clip: &Clip) -> Self {
        let h = clip.seq.split.past;
        Self {
            human: clip.seq.human[..h].to_vec(),
            object: clip.seq.object[..h].to_vec(),
            shape: clip.shape.clone(),
            fps: clip.seq.fps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sampled {
    /// Past plus sampled future per request, in world coordinates.
    pub sequences: Vec<HoiSequence>,
    pub report: Vec<CorrectionRecord>,
}

pub trait Sampler {
    fn split(&self) -> Split;

    /// One future per request. Element `i` draws from noise stream `i` of
    /// `seed`, so outputs depend only on the request's position.
    fn sample(&self, requests: &[SampleRequest], seed: u64) -> Result<Sampled>;
}

/// Correction wiring for [`InterDiffSampler`].
pub struct Correction<'a> {
    pub config: CorrectorConfig,
    pub scheduler: &'a dyn Scheduler,
    pub model: &'a dyn InteractionModel,
}

pub struct InterDiffSampler<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub norm: &'a NormStats,
    pub body: &'a BodyProxy,
    pub split: Split,
    pub canonical: CanonicalConfig,
    pub correction: Option<Correction<'a>>,
}

fn shape_array(shape: &ObjectShape) -> Array2<f64> {
    Array2::from_shape_fn((shape.points.len(), 3), |(i, k)| shape.points[i][k])
}

impl Sampler for InterDiffSampler<'_> {
    fn split(&self) -> Split {
        self.split
    }

    fn sample(&self, requests: &[SampleRequest], seed: u64) -> Result<Sampled> {
        let h = self.split.past;
        let mut conds = Vec::with_capacity(requests.len());
        let mut frames = Vec::with_capacity(requests.len());
        let mut elements = Vec::with_capacity(requests.len());
        for r in requests {
            if r.human.len() != h || r.object.len() != h {
                return Err(Error::shape("request past frames", h, format!("{} human / {} object", r.human.len(), r.object.len())));
            }
            let canon = Canonical::fit(&r.human[h - 1], self.body, self.canonical.yaw_align);
            let human: Vec<HumanPose> = r.human.iter().map(|p| canon.human(p)).collect();
            let object: Vec<ObjectPose> = r.object.iter().map(|o| canon.object(o)).collect();
            conds.push(Condition {
                past: self.norm.normalize(flatten_frames(&human, &object).view())?,
                shape_points: shape_array(&r.shape),
            });
            elements.push(ElementContext {
                past_human: human,
                past_object: object,
                fps: r.fps,
                shape: r.shape.clone(),
            });
            frames.push(canon);
        }
        let mut corrector = self.correction.as_ref().map(|c| Corrector {
            config: c.config.clone(),
            scheduler: c.scheduler,
            model: c.model,
            body: self.body,
            norm: self.norm,
            elements,
        });
        let hook = corrector.as_mut().map(|c| c as &mut dyn CorrectionHook);
        let out = sample_with_correction(&conds, self.split.future, self.denoiser, self.schedule, hook, seed)?;
        let sequences = decode_batch(&out.x0, self.norm, requests, &frames, self.split)?;
        Ok(Sampled {
            sequences,
            report: out.report,
        })
    }
}

/// Sampled futures mapped back to the world, behind the requests' own past.
fn decode_batch(x0: &Array3<f64>, norm: &NormStats, requests: &[SampleRequest], frames: &[Canonical], split: Split) -> Result<Vec<HoiSequence>> {
    x0.axis_iter(Axis(0))
        .zip(requests.iter().zip(frames))
        .map(|(x, (r, canon))| {
            let raw = norm.denormalize(x)?;
            let (human, object) = decode_frames(raw.view(), r.human[0].joint_count())?;
            HoiSequence::new(
                r.human.iter().cloned().chain(human.iter().map(|h| canon.human_back(h))).collect(),
                r.object.iter().copied().chain(object.iter().map(|o| canon.object_back(o))).collect(),
                r.fps,
                split,
            )
        })
        .collect()
}
