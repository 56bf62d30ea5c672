//! Desk-scale synthetic interactions: a walking humanoid driven by smooth
//! random joint-angle splines, and an object that is carried, swung,
//! released, pushed or left alone.

use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Clip;
use crate::body::{forward_kinematics, joints::*, marker_frames, marker_positions, BodyProxy, JointAngles, HAND_MARKERS};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rotation::Vec3;
use crate::shape::{ObjectShape, Primitive, DEFAULT_KEYPOINTS, DEFAULT_POINTS};
use crate::types::{HoiSequence, HumanPose, ObjectPose, Split};

/// Contact scenarios place the contact point this far outside the marker's
/// surface so that it is not counted as penetrating.
const SURFACE_GAP: f64 = 5e-7;
const ATTEMPTS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: String,
    /// Total frames; must cover `split`.
    pub frames: usize,
    pub seed: u64,
    pub fps: f64,
    /// Horizon the clip is meant for; the clip itself is split as
    /// `(H, frames − H)`.
    pub split: Split,
    /// Contact threshold used to keep `no_contact` clips well clear.
    pub eps_contact: f64,
}

impl Scenario {
    pub fn new(kind: &str, frames: usize, seed: u64) -> Self {
        Self {
            kind: kind.to_string(),
            frames,
            seed,
            fps: 30.0,
            split: Split::default(),
            eps_contact: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub clip: Clip,
    pub kind: String,
    /// Marker the object is attached to, if any.
    pub anchor: Option<usize>,
    /// Frames `0..contact_frames` keep the anchor in contact.
    pub contact_frames: usize,
}

/// Human motion and the tracks of every marker.
pub struct HumanTrack<'a> {
    pub body: &'a BodyProxy,
    pub poses: Vec<HumanPose>,
    pub markers: Vec<Vec<Vec3>>,
    pub frames: Vec<Vec<Rotation3<f64>>>,
    pub fps: f64,
}

impl HumanTrack<'_> {
    /// Outward surface normal of marker `m` at frame `i`.
    pub fn normal(&self, m: usize, i: usize) -> Vec3 {
        (self.frames[i][m] * self.body.markers.markers[m].offset).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArmStyle {
    /// Both forearms raised in front of the chest.
    Hold,
    /// Arms swing loosely with the gait.
    Free,
}

pub struct ObjectTrack {
    pub poses: Vec<ObjectPose>,
    pub anchor: Option<usize>,
    pub contact_frames: usize,
}

/// One kind of synthetic interaction.
pub trait ScenarioKind: Send + Sync {
    fn arms(&self) -> ArmStyle;

    fn object_track(&self, human: &HumanTrack, shape: &ObjectShape, scenario: &Scenario, rng: &mut ChaCha8Rng) -> Result<ObjectTrack>;
}

pub fn scenario_kinds() -> &'static Registry<dyn ScenarioKind> {
    static REGISTRY: OnceLock<Registry<dyn ScenarioKind>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn ScenarioKind> = Registry::new("scenario");
        r.register("carry", Box::new(Carry));
        r.register("swing", Box::new(Swing));
        r.register("release", Box::new(Release));
        r.register("push", Box::new(Push));
        r.register("no_contact", Box::new(NoContact));
        r
    })
}

/// Catmull-Rom curve through random keys in `[-amp, amp]` spaced `spacing`
/// frames apart.
fn spline(rng: &mut ChaCha8Rng, frames: usize, spacing: usize, amp: f64) -> Vec<f64> {
    let keys: Vec<f64> = (0..frames / spacing + 4).map(|_| rng.random_range(-amp..=amp)).collect();
    (0..frames)
        .map(|f| {
            let u = f as f64 / spacing as f64;
            let i = u.floor() as usize + 1;
            let s = u - u.floor();
            let (p0, p1, p2, p3) = (keys[i - 1], keys[i], keys[i + 1], keys[i + 2]);
            0.5 * (2.0 * p1
                + (p2 - p0) * s
                + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s * s
                + (3.0 * p1 - p0 - 3.0 * p2 + p3) * s * s * s)
        })
        .collect()
}

fn rx(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), a)
}

fn ry(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), a)
}

fn rz(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a)
}

fn wobble(rng: &mut ChaCha8Rng, frames: usize, amp: f64) -> Vec<UnitQuaternion<f64>> {
    let a = spline(rng, frames, 12, amp);
    let b = spline(rng, frames, 12, amp);
    let c = spline(rng, frames, 12, amp);
    (0..frames).map(|i| UnitQuaternion::from_euler_angles(a[i], b[i], c[i])).collect()
}

/// Walking humanoid with gait-coupled legs.
pub fn human_motion(body: &BodyProxy, frames: usize, fps: f64, arms: ArmStyle, rng: &mut ChaCha8Rng) -> Result<Vec<HumanPose>> {
    let dt = 1.0 / fps;
    let heading0 = rng.random_range(0.0..TAU);
    let heading = spline(rng, frames, 30, 0.5);
    let base_speed = rng.random_range(0.0..0.7);
    let speed_var = spline(rng, frames, 30, 0.15);
    let pitch = spline(rng, frames, 20, 0.08);
    let roll = spline(rng, frames, 20, 0.05);
    let spine1 = wobble(rng, frames, 0.08);
    let spine2 = wobble(rng, frames, 0.08);
    let neck = wobble(rng, frames, 0.15);
    let collar = [wobble(rng, frames, 0.04), wobble(rng, frames, 0.04)];
    let leg_noise = [spline(rng, frames, 15, 0.06), spline(rng, frames, 15, 0.06)];
    let (flex0, add0, elbow0) = match arms {
        ArmStyle::Hold => (
            [rng.random_range(0.7..1.3), rng.random_range(0.7..1.3)],
            [rng.random_range(0.0..0.25), rng.random_range(0.0..0.25)],
            [rng.random_range(0.3..1.1), rng.random_range(0.3..1.1)],
        ),
        ArmStyle::Free => ([0.1, 0.1], [-0.1, -0.1], [0.2, 0.2]),
    };
    let flex = [spline(rng, frames, 15, 0.12), spline(rng, frames, 15, 0.12)];
    let add = [spline(rng, frames, 15, 0.06), spline(rng, frames, 15, 0.06)];
    let elbow = [spline(rng, frames, 15, 0.12), spline(rng, frames, 15, 0.12)];

    let mut pos = Vec3::new(rng.random_range(-1.0..1.0), 0.0, rng.random_range(-1.0..1.0));
    let mut phase = rng.random_range(0.0..TAU);
    let mut poses = Vec::with_capacity(frames);
    for i in 0..frames {
        let h = heading0 + heading[i];
        let speed = (base_speed + speed_var[i]).max(0.0);
        let gait = (speed / 0.7).min(1.0);
        if i > 0 {
            pos += Vec3::new(h.sin(), 0.0, h.cos()) * speed * dt;
            phase += TAU * speed / 1.2 * dt;
        }
        let mut rot = vec![UnitQuaternion::identity(); body.skeleton.joint_count()];
        rot[PELVIS] = ry(h) * rx(pitch[i]) * rz(roll[i]);
        rot[SPINE1] = spine1[i];
        rot[SPINE2] = spine2[i];
        rot[NECK] = neck[i];
        rot[L_COLLAR] = collar[0][i];
        rot[R_COLLAR] = collar[1][i];
        for (side, (hip, knee)) in [(L_HIP, L_KNEE), (R_HIP, R_KNEE)].into_iter().enumerate() {
            let s = if side == 0 { phase.sin() } else { -phase.sin() };
            let c = if side == 0 { phase.cos() } else { -phase.cos() };
            rot[hip] = rx(-(0.4 * gait * s + leg_noise[side][i]));
            rot[knee] = rx(0.55 * gait * (0.5 + 0.5 * c).powi(2) + leg_noise[side][i].abs());
        }
        for (side, (shoulder, elb)) in [(L_SHOULDER, L_ELBOW), (R_SHOULDER, R_ELBOW)].into_iter().enumerate() {
            let inward = if side == 0 { -1.0 } else { 1.0 };
            let swing = match arms {
                ArmStyle::Hold => 0.0,
                ArmStyle::Free => 0.3 * gait * if side == 0 { -phase.sin() } else { phase.sin() },
            };
            rot[shoulder] = rx(-(flex0[side] + flex[side][i] + swing)) * rz(inward * (add0[side] + add[side][i]));
            rot[elb] = rx(-(elbow0[side] + elbow[side][i]).max(0.0));
        }
        let bob = 0.015 * gait * (2.0 * phase).cos();
        let angles = JointAngles {
            root_translation: pos + Vec3::new(0.0, bob, 0.0),
            rotations: rot,
        };
        poses.push(forward_kinematics(&body.skeleton, &angles)?);
    }
    Ok(poses)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let q = nalgebra::Quaternion::new(
        rng.sample::<f64, _>(rand_distr::StandardNormal),
        rng.sample(rand_distr::StandardNormal),
        rng.sample(rand_distr::StandardNormal),
        rng.sample(rand_distr::StandardNormal),
    );
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

/// Picks a hand marker and a rotation, and the object point that touches the
/// marker: the one deepest along the inward normal, so the rest of the
/// object starts on the outer side of the marker's tangent plane.
fn attach(human: &HumanTrack, shape: &ObjectShape, rng: &mut ChaCha8Rng) -> (usize, Rotation3<f64>, usize) {
    let m = HAND_MARKERS[rng.random_range(0..HAND_MARKERS.len())];
    let r = random_rotation(rng);
    let n = human.normal(m, 0);
    let k = (0..shape.len())
        .min_by(|&a, &b| (r * shape.points[a]).dot(&n).total_cmp(&(r * shape.points[b]).dot(&n)))
        .expect("non-empty shape");
    (m, r, k)
}

/// Translation placing object point `k` just outside marker `m` at frame `i`.
fn touching(human: &HumanTrack, m: usize, i: usize, r: &Rotation3<f64>, point: &Vec3) -> Vec3 {
    human.markers[i][m] + human.normal(m, i) * SURFACE_GAP - r * point
}

pub struct Carry;

impl ScenarioKind for Carry {
    fn arms(&self) -> ArmStyle {
        ArmStyle::Hold
    }

    fn object_track(&self, human: &HumanTrack, shape: &ObjectShape, _s: &Scenario, rng: &mut ChaCha8Rng) -> Result<ObjectTrack> {
        let (m, r, k) = attach(human, shape, rng);
        let poses = (0..human.poses.len())
            .map(|i| ObjectPose::new(r, touching(human, m, i, &r, &shape.points[k])))
            .collect();
        Ok(ObjectTrack {
            poses,
            anchor: Some(m),
            contact_frames: human.poses.len(),
        })
    }
}

/// Rotation about a world-fixed axis through the contact marker.
pub struct Swing;

impl ScenarioKind for Swing {
    fn arms(&self) -> ArmStyle {
        ArmStyle::Hold
    }

    fn object_track(&self, human: &HumanTrack, shape: &ObjectShape, _s: &Scenario, rng: &mut ChaCha8Rng) -> Result<ObjectTrack> {
        let (m, r0, k) = attach(human, shape, rng);
        let axis = nalgebra::Unit::new_normalize(human.normal(m, 0));
        let omega = rng.random_range(1.0..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let poses = (0..human.poses.len())
            .map(|i| {
                let r = Rotation3::from_axis_angle(&axis, omega * i as f64 / human.fps) * r0;
                ObjectPose::new(r, touching(human, m, i, &r, &shape.points[k]))
            })
            .collect();
        Ok(ObjectTrack {
            poses,
            anchor: Some(m),
            contact_frames: human.poses.len(),
        })
    }
}

/// Carried, then left in place. The release frame is drawn among those after
/// which the parked object stays clear of the body.
pub struct Release;

impl ScenarioKind for Release {
    fn arms(&self) -> ArmStyle {
        ArmStyle::Hold
    }

    fn object_track(&self, human: &HumanTrack, shape: &ObjectShape, s: &Scenario, rng: &mut ChaCha8Rng) -> Result<ObjectTrack> {
        let n = human.poses.len();
        let lo = s.split.past.min(n - 1).max(1);
        let (m, r, k) = attach(human, shape, rng);
        let held: Vec<ObjectPose> = (0..n).map(|i| ObjectPose::new(r, touching(human, m, i, &r, &shape.points[k]))).collect();
        let mut candidates: Vec<usize> = (lo..n).collect();
        candidates.shuffle(rng);
        let clear = |release: usize| {
            let parked = shape.posed(&held[release - 1]);
            human.poses[release..].iter().all(|h| parked.iter().all(|p| human.body.sdf(h, p) >= 0.0))
        };
        let release = candidates
            .into_iter()
            .find(|&f| clear(f))
            .ok_or_else(|| Error::Generation("no release frame leaves the object clear of the body".into()))?;
        let poses = (0..n).map(|i| held[i.min(release - 1)]).collect();
        Ok(ObjectTrack {
            poses,
            anchor: Some(m),
            contact_frames: release,
        })
    }
}

/// The object slides horizontally with the hand, keeping its starting height
/// except where that would put it into the arm; there it rises or sinks
/// towards the hand just far enough to stay clear.
pub struct Push;

impl ScenarioKind for Push {
    fn arms(&self) -> ArmStyle {
        ArmStyle::Hold
    }

    fn object_track(&self, human: &HumanTrack, shape: &ObjectShape, _s: &Scenario, rng: &mut ChaCha8Rng) -> Result<ObjectTrack> {
        let (m, r, k) = attach(human, shape, rng);
        let t0 = touching(human, m, 0, &r, &shape.points[k]);
        let poses = (0..human.poses.len())
            .map(|i| {
                let t = touching(human, m, i, &r, &shape.points[k]);
                let clear = |o: &ObjectPose| shape.posed(o).iter().all(|p| human.body.sdf(&human.poses[i], p) >= 0.0);
                [0.0, 0.25, 0.5, 0.75]
                    .iter()
                    .map(|&w| ObjectPose::new(r, Vec3::new(t.x, t0.y + w * (t.y - t0.y), t.z)))
                    .find(|o| clear(o))
                    .unwrap_or_else(|| ObjectPose::new(r, t))
            })
            .collect();
        Ok(ObjectTrack {
            poses,
            anchor: Some(m),
            contact_frames: human.poses.len(),
        })
    }
}

/// The object drifts slowly, well away from every marker.
pub struct NoContact;

impl ScenarioKind for NoContact {
    fn arms(&self) -> ArmStyle {
        ArmStyle::Free
    }

    fn object_track(&self, human: &HumanTrack, _shape: &ObjectShape, _s: &Scenario, rng: &mut ChaCha8Rng) -> Result<ObjectTrack> {
        let root = human.poses[0].joints[PELVIS];
        let dir = rng.random_range(0.0..TAU);
        let dist = rng.random_range(0.5..1.1);
        let start = Vec3::new(root.x + dist * dir.sin(), rng.random_range(0.2..1.3), root.z + dist * dir.cos());
        let drift_dir = rng.random_range(0.0..TAU);
        let drift = Vec3::new(drift_dir.sin(), 0.0, drift_dir.cos()) * rng.random_range(0.0..0.2);
        let spin_axis = nalgebra::Unit::new_normalize(Vec3::new(0.0, 1.0, 0.0));
        let spin = rng.random_range(-PI / 2.0..PI / 2.0);
        let r0 = random_rotation(rng);
        let poses = (0..human.poses.len())
            .map(|i| {
                let time = i as f64 / human.fps;
                ObjectPose::new(Rotation3::from_axis_angle(&spin_axis, spin * time) * r0, start + drift * time)
            })
            .collect();
        Ok(ObjectTrack {
            poses,
            anchor: None,
            contact_frames: 0,
        })
    }
}

fn penetrates(human: &[HumanPose], object: &[ObjectPose], shape: &ObjectShape, body: &BodyProxy) -> bool {
    human
        .iter()
        .zip(object)
        .any(|(h, o)| shape.posed(o).iter().any(|p| body.sdf(h, p) < 0.0))
}

fn min_marker_distance(human: &HumanTrack, object: &[ObjectPose], shape: &ObjectShape) -> f64 {
    human
        .markers
        .iter()
        .zip(object)
        .map(|(ms, o)| {
            let pts = shape.posed(o);
            ms.iter()
                .map(|m| crate::geometry::nearest_distance(m, &pts))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Generates one clip; fully determined by the scenario. Attempts whose
/// ground truth would penetrate the body (or, for `no_contact`, come within
/// `3·eps_contact` of a marker) are redrawn from the same seed stream.
pub fn generate_synthetic(scenario: &Scenario, body: &BodyProxy) -> Result<SyntheticClip> {
    let kind = scenario_kinds().get(&scenario.kind)?;
    if scenario.frames < scenario.split.total() {
        return Err(Error::Generation(format!(
            "{} frames cannot hold H + F = {}",
            scenario.frames,
            scenario.split.total()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    for _ in 0..ATTEMPTS {
        let shape = ObjectShape::sample(Primitive::random(&mut rng), DEFAULT_POINTS, DEFAULT_KEYPOINTS, rng.random())?;
        let poses = human_motion(body, scenario.frames, scenario.fps, kind.arms(), &mut rng)?;
        let track = HumanTrack {
            body,
            markers: poses.iter().map(|p| marker_positions(p, &body.skeleton, &body.markers)).collect(),
            frames: poses.iter().map(|p| marker_frames(p, &body.skeleton, &body.markers)).collect(),
            poses,
            fps: scenario.fps,
        };
        let object = match kind.object_track(&track, &shape, scenario, &mut rng) {
            Ok(o) => o,
            Err(Error::Generation(_)) => continue,
            Err(e) => return Err(e),
        };
        if penetrates(&track.poses, &object.poses, &shape, body) {
            continue;
        }
        if object.anchor.is_none() && min_marker_distance(&track, &object.poses, &shape) <= 3.0 * scenario.eps_contact {
            continue;
        }
        let split = Split::new(scenario.split.past, scenario.frames - scenario.split.past)?;
        let seq = HoiSequence::new(track.poses, object.poses, scenario.fps, split)?;
        return Ok(SyntheticClip {
            clip: Clip { seq, shape },
            kind: scenario.kind.clone(),
            anchor: object.anchor,
            contact_frames: object.contact_frames,
        });
    }
    Err(Error::Generation(format!(
        "no feasible {} clip for seed {} after {ATTEMPTS} attempts",
        scenario.kind, scenario.seed
    )))
}

/// `count` clips cycling through `kinds`, with per-clip seeds derived from
/// `seed`.
pub fn generate_corpus(kinds: &[&str], count: usize, frames: usize, split: Split, seed: u64, body: &BodyProxy) -> Result<Vec<SyntheticClip>> {
    if kinds.is_empty() {
        return Err(Error::Config("no scenario kinds given".into()));
    }
    (0..count)
        .map(|i| {
            let mut s = Scenario::new(kinds[i % kinds.len()], frames, clip_seed(seed, i));
            s.split = split;
            generate_synthetic(&s, body)
        })
        .collect()
}

pub fn clip_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}
