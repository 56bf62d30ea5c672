//! The correction scheduler, the blending rule and the hook that plugs both
//! into the sampling loop.

use std::io::Write;
use std::sync::OnceLock;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::body::BodyProxy;
use crate::data::norm::NormStats;
use crate::diffusion::CorrectionHook;
use crate::error::{Error, Result};
use crate::geometry::{contact_state, penetration_state, select_reference, ContactMode, ContactState, PenetrationState, ReferenceChoice};
use crate::registry::Registry;
use crate::rotation::rotation_from_rot6d;
use crate::shape::ObjectShape;
use crate::types::{decode_frames, HoiSequence, HumanPose, ObjectPose, Split, OBJECT_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    /// Markers against the full point cloud; contact and penetration gate.
    #[default]
    Mesh,
    /// Joints against keypoints; only the step window gates.
    Skeletal,
}

impl CorrectionMode {
    pub fn contact_mode(&self) -> ContactMode {
        match self {
            CorrectionMode::Mesh => ContactMode::Marker,
            CorrectionMode::Skeletal => ContactMode::Joint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorConfig {
    /// Trigger on `‖P‖` above this (meters, l2 over frames).
    pub eps_penetration: f64,
    /// Per-frame contact distance (meters); scaled by `√F` for `‖C[j]‖`.
    pub eps_contact: f64,
    /// Steps `t ≤ late_fraction·T` are eligible.
    pub late_fraction: f64,
    pub stride: usize,
    pub mode: CorrectionMode,
}

impl Default for CorrectorConfig {
    fn default() -> Self {
        Self {
            eps_penetration: 0.01,
            eps_contact: 0.05,
            late_fraction: 0.1,
            stride: 2,
            mode: CorrectionMode::Mesh,
        }
    }
}

impl CorrectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_penetration > 0.0 && self.eps_contact > 0.0) {
            return Err(Error::Config("corrector thresholds must be positive".into()));
        }
        if !(self.late_fraction > 0.0 && self.late_fraction <= 1.0) {
            return Err(Error::Config(format!("late_fraction {} outside (0, 1]", self.late_fraction)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether step `t` of `total` falls on the correction schedule.
    pub fn in_window(&self, t: usize, total: usize) -> bool {
        t as f64 <= self.late_fraction * total as f64 + 1e-9 && t % self.stride == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Penetration,
    NoContact,
    ScheduleOnly,
    None,
}

/// The gate: late, on-stride steps that show penetration or lack contact
/// (mesh mode), or any late on-stride step (skeletal mode).
pub fn should_correct(
    p: &PenetrationState,
    c: &ContactState,
    t: usize,
    total: usize,
    cfg: &CorrectorConfig,
) -> (bool, Trigger) {
    if !cfg.in_window(t, total) {
        return (false, Trigger::None);
    }
    match cfg.mode {
        CorrectionMode::Skeletal => (true, Trigger::ScheduleOnly),
        CorrectionMode::Mesh => {
            if p.norm() > cfg.eps_penetration {
                (true, Trigger::Penetration)
            } else if c.min_norm().1 > c.scaled_threshold(cfg.eps_contact) {
                (true, Trigger::NoContact)
            } else {
                (false, Trigger::None)
            }
        }
    }
}

fn blend_pose(a: &ObjectPose, b: &ObjectPose, keep: f64) -> Result<ObjectPose> {
    let (fa, fb) = (a.features(), b.features());
    let mut f = [0.0; OBJECT_FEATURES];
    for k in 0..OBJECT_FEATURES {
        f[k] = fa[k] + (1.0 - keep) * (fb[k] - fa[k]);
    }
    let r6: [f64; 6] = f[..6].try_into().expect("six entries");
    Ok(ObjectPose::new(
        rotation_from_rot6d(&r6)?,
        crate::rotation::Vec3::new(f[6], f[7], f[8]),
    ))
}

/// `x̃·t/T + x̂·(1 − t/T)` on object channels in 6D-feature space, rotations
/// re-orthonormalized; human channels come from `x̃`.
pub fn blend(x_tilde: &HoiSequence, x_hat: &HoiSequence, t: usize, total: usize) -> Result<HoiSequence> {
    if x_tilde.frames() != x_hat.frames() {
        return Err(Error::shape("blend frames", x_tilde.frames(), x_hat.frames()));
    }
    if total == 0 || t > total {
        return Err(Error::Index {
            index: t as i64,
            valid: format!("0..={total}"),
        });
    }
    let keep = t as f64 / total as f64;
    let object = x_tilde
        .object
        .iter()
        .zip(&x_hat.object)
        .map(|(a, b)| blend_pose(a, b, keep))
        .collect::<Result<Vec<_>>>()?;
    HoiSequence::new(x_tilde.human.clone(), object, x_tilde.fps, x_tilde.split)
}

/// One scheduler decision for one batch element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub element: usize,
    pub t: usize,
    pub fired: bool,
    pub trigger: Trigger,
    pub s: ReferenceChoice,
    /// `‖P‖`, when geometry was evaluated.
    pub penetration: Option<f64>,
    /// `min_j ‖C[j]‖`, when geometry was evaluated.
    pub min_contact: Option<f64>,
}

pub fn write_report(records: &[CorrectionRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidValue(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Decides whether to correct at a step.
pub trait Scheduler: Send + Sync {
    /// Whether step `t` is looked at at all; geometry is only evaluated on
    /// consulted steps.
    fn consult(&self, _t: usize, _total: usize, _cfg: &CorrectorConfig) -> bool {
        true
    }

    fn decide(
        &self,
        p: Option<&PenetrationState>,
        c: Option<&ContactState>,
        t: usize,
        total: usize,
        cfg: &CorrectorConfig,
    ) -> (bool, Trigger);
}

/// Window, stride and contact/penetration gating.
pub struct Gated;

impl Scheduler for Gated {
    fn consult(&self, t: usize, total: usize, cfg: &CorrectorConfig) -> bool {
        cfg.in_window(t, total)
    }

    fn decide(
        &self,
        p: Option<&PenetrationState>,
        c: Option<&ContactState>,
        t: usize,
        total: usize,
        cfg: &CorrectorConfig,
    ) -> (bool, Trigger) {
        match (p, c, cfg.mode) {
            (Some(p), Some(c), _) => should_correct(p, c, t, total, cfg),
            (_, _, CorrectionMode::Skeletal) if cfg.in_window(t, total) => (true, Trigger::ScheduleOnly),
            _ => (false, Trigger::None),
        }
    }
}

/// Fires on every step.
pub struct Always;

impl Scheduler for Always {
    fn decide(
        &self,
        _p: Option<&PenetrationState>,
        _c: Option<&ContactState>,
        _t: usize,
        _total: usize,
        _cfg: &CorrectorConfig,
    ) -> (bool, Trigger) {
        (true, Trigger::ScheduleOnly)
    }
}

/// Never fires.
pub struct Never;

impl Scheduler for Never {
    fn consult(&self, _t: usize, _total: usize, _cfg: &CorrectorConfig) -> bool {
        false
    }

    fn decide(
        &self,
        _p: Option<&PenetrationState>,
        _c: Option<&ContactState>,
        _t: usize,
        _total: usize,
        _cfg: &CorrectorConfig,
    ) -> (bool, Trigger) {
        (false, Trigger::None)
    }
}

pub fn schedulers() -> &'static Registry<dyn Scheduler> {
    static REGISTRY: OnceLock<Registry<dyn Scheduler>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Scheduler> = Registry::new("correction scheduler");
        r.register("gated", Box::new(Gated));
        r.register("always", Box::new(Always));
        r.register("never", Box::new(Never));
        r
    })
}

/// Produces `x̂` from a denoised interaction and a reference choice.
pub trait InteractionModel {
    fn predict(&self, x_tilde: &HoiSequence, s: ReferenceChoice) -> Result<HoiSequence>;
}

/// Returns `x̃` unchanged.
pub struct IdentityModel;

impl InteractionModel for IdentityModel {
    fn predict(&self, x_tilde: &HoiSequence, _s: ReferenceChoice) -> Result<HoiSequence> {
        Ok(x_tilde.clone())
    }
}

/// Per-element context needed to turn a normalized `x̃` back into poses.
#[derive(Debug, Clone)]
pub struct ElementContext {
    /// Clean past frames in the sampling frame.
    pub past_human: Vec<HumanPose>,
    pub past_object: Vec<ObjectPose>,
    pub fps: f64,
    pub shape: ObjectShape,
}

/// Algorithm-1 correction as a sampling hook.
pub struct Corrector<'a> {
    pub config: CorrectorConfig,
    pub scheduler: &'a dyn Scheduler,
    pub model: &'a dyn InteractionModel,
    pub body: &'a BodyProxy,
    pub norm: &'a NormStats,
    pub elements: Vec<ElementContext>,
}

impl Corrector<'_> {
    fn element(&self, b: usize, t: usize, total: usize, x: &mut Array2<f64>) -> Result<CorrectionRecord> {
        let ctx = &self.elements[b];
        let mut record = CorrectionRecord {
            element: b,
            t,
            fired: false,
            trigger: Trigger::None,
            s: ReferenceChoice::Ground,
            penetration: None,
            min_contact: None,
        };
        if !self.scheduler.consult(t, total, &self.config) {
            return Ok(record);
        }
        let joints = ctx.past_human.first().map_or(0, HumanPose::joint_count);
        let raw = self.norm.denormalize(x.view())?;
        let (human, object) = decode_frames(raw.view(), joints)?;
        let c = contact_state(&human, &object, &ctx.shape, self.body, self.config.mode.contact_mode())?;
        let p = match self.config.mode {
            CorrectionMode::Mesh => Some(penetration_state(&human, &object, &ctx.shape, self.body)?),
            CorrectionMode::Skeletal => None,
        };
        let (fired, trigger) = self.scheduler.decide(p.as_ref(), Some(&c), t, total, &self.config);
        record.penetration = p.as_ref().map(PenetrationState::norm);
        record.min_contact = Some(c.min_norm().1);
        record.fired = fired;
        record.trigger = trigger;
        if !fired {
            return Ok(record);
        }
        record.s = select_reference(&c, self.config.eps_contact);
        let split = Split::new(ctx.past_human.len(), raw.nrows())?;
        let full = HoiSequence::new(
            ctx.past_human.iter().cloned().chain(human).collect(),
            ctx.past_object.iter().copied().chain(object).collect(),
            ctx.fps,
            split,
        )?;
        let x_hat = self.model.predict(&full, record.s)?;
        let blended = blend(&full, &x_hat, t, total)?;
        let h = full.split.past;
        let base = joints * 3;
        let mut changed = raw.clone();
        let mut any = false;
        for (i, (o_new, o_old)) in blended.object[h..].iter().zip(&full.object[h..]).enumerate() {
            if o_new != o_old {
                any = true;
                for (k, v) in o_new.features().iter().enumerate() {
                    changed[(i, base + k)] = *v;
                }
            }
        }
        if any {
            let renorm = self.norm.normalize(changed.view())?;
            x.slice_mut(s![.., base..]).assign(&renorm.slice(s![.., base..]));
        }
        Ok(record)
    }
}

impl CorrectionHook for Corrector<'_> {
    fn correct(&mut self, t: usize, total: usize, x_tilde: &mut Array3<f64>) -> Result<Vec<CorrectionRecord>> {
        if x_tilde.shape()[0] != self.elements.len() {
            return Err(Error::shape("corrector batch", self.elements.len(), x_tilde.shape()[0]));
        }
        let mut records = Vec::with_capacity(self.elements.len());
        for (b, mut x) in x_tilde.axis_iter_mut(Axis(0)).enumerate() {
            let mut owned = x.to_owned();
            records.push(self.element(b, t, total, &mut owned)?);
            x.assign(&owned);
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::Vec3;
    use crate::types::{HumanPose, Split};
    use nalgebra::{Rotation3, UnitQuaternion};

    fn states(p: f64, c_min: f64, frames: usize) -> (PenetrationState, ContactState) {
        let mut per_frame = vec![0.0; frames];
        per_frame[0] = p;
        (
            PenetrationState { per_frame },
            ContactState {
                distances: Array2::from_elem((frames, 3), c_min),
            },
        )
    }

    #[test]
    fn early_steps_never_fire() {
        let cfg = CorrectorConfig::default();
        let (p, c) = states(1.0, 10.0, 25);
        assert_eq!(should_correct(&p, &c, 100, 100, &cfg), (false, Trigger::None));
        assert_eq!(should_correct(&p, &c, 9, 100, &cfg), (false, Trigger::None));
    }

    #[test]
    fn late_step_gating() {
        let cfg = CorrectorConfig::default();
        let (p, c) = states(0.0, 0.01, 25);
        assert_eq!(should_correct(&p, &c, 10, 100, &cfg), (false, Trigger::None));
        let (p, c) = states(0.02, 0.01, 25);
        assert_eq!(should_correct(&p, &c, 10, 100, &cfg), (true, Trigger::Penetration));
        let (p, c) = states(0.0, 0.2, 25);
        assert_eq!(should_correct(&p, &c, 4, 100, &cfg), (true, Trigger::NoContact));
        let skeletal = CorrectorConfig { mode: CorrectionMode::Skeletal, ..cfg };
        let (p, c) = states(0.0, 0.01, 25);
        assert_eq!(should_correct(&p, &c, 2, 100, &skeletal), (true, Trigger::ScheduleOnly));
    }

    #[test]
    fn eligible_steps_for_default_window() {
        let cfg = CorrectorConfig::default();
        let steps: Vec<usize> = (0..=100).filter(|t| cfg.in_window(*t, 100)).collect();
        assert_eq!(steps, vec![0, 2, 4, 6, 8, 10]);
    }

    #[test]
    fn monotone_in_penetration() {
        let cfg = CorrectorConfig::default();
        let mut fired_before = false;
        for i in 0..200 {
            let (p, c) = states(i as f64 * 1e-4, 0.0, 25);
            let fired = should_correct(&p, &c, 10, 100, &cfg).0;
            assert!(fired || !fired_before);
            fired_before = fired;
        }
        assert!(fired_before);
    }

    fn seq(offset: f64, angle: f64) -> HoiSequence {
        let human = vec![HumanPose::new(vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)]).unwrap(); 3];
        let object = (0..3)
            .map(|i| {
                ObjectPose::from_quaternion(
                    UnitQuaternion::from_euler_angles(0.0, angle, 0.1 * i as f64),
                    Vec3::new(offset + i as f64, 0.0, 0.0),
                )
            })
            .collect();
        HoiSequence::new(human, object, 30.0, Split::new(1, 2).unwrap()).unwrap()
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let a = seq(0.0, 0.3);
        let b = seq(2.0, -0.4);
        assert_eq!(blend(&a, &b, 100, 100).unwrap(), a);
        let at_zero = blend(&a, &b, 0, 100).unwrap();
        for (x, y) in at_zero.object.iter().zip(&b.object) {
            assert!((x.rotation().matrix() - y.rotation().matrix()).abs().max() < 1e-12);
            assert_eq!(x.translation, y.translation);
        }
        let mid = blend(&a, &b, 50, 100).unwrap();
        for ((m, x), y) in mid.object.iter().zip(&a.object).zip(&b.object) {
            assert!((m.translation - (x.translation + y.translation) / 2.0).norm() < 1e-9);
            let r: &Rotation3<f64> = m.rotation();
            assert!((r.matrix() * r.matrix().transpose() - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
        }
        for t in [0, 3, 50, 99, 100] {
            assert_eq!(blend(&a, &a, t, 100).unwrap(), a);
        }
    }
}
