//! Metrics, Best-of-Many and autoregressive rollout.
//!
//! Distances are reported in millimeters, rotation error ×1000 and Pene in
//! units of 10⁻² % (fraction ×10⁴).

use nalgebra::Quaternion;
use serde::{Deserialize, Serialize};

use crate::body::BodyProxy;
use crate::corrector::{CorrectionMode, CorrectionRecord};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::pipeline::{SampleRequest, Sampler};
use crate::rotation::Vec3;
use crate::shape::ObjectShape;
use crate::types::{HoiSequence, HumanPose, ObjectPose, Split};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_h: f64,
    pub mpjpe_o: f64,
    pub trans_err: f64,
    pub rot_err: f64,
    /// 10⁻² %; absent in skeletal mode.
    pub pene: Option<f64>,
    /// Raw penetrating-vertex fraction behind `pene`.
    pub pene_fraction: Option<f64>,
}

impl MetricsReport {
    fn fields(&self) -> [Option<f64>; 6] {
        [
            Some(self.mpjpe_h),
            Some(self.mpjpe_o),
            Some(self.trans_err),
            Some(self.rot_err),
            self.pene,
            self.pene_fraction,
        ]
    }

    fn from_fields(f: [Option<f64>; 6]) -> Self {
        Self {
            mpjpe_h: f[0].unwrap_or(0.0),
            mpjpe_o: f[1].unwrap_or(0.0),
            trans_err: f[2].unwrap_or(0.0),
            rot_err: f[3].unwrap_or(0.0),
            pene: f[4],
            pene_fraction: f[5],
        }
    }

    fn combine(reports: &[MetricsReport], fold: fn(&[f64]) -> f64) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidValue("no metric reports to combine".into()));
        }
        let fields: Vec<_> = reports.iter().map(MetricsReport::fields).collect();
        let mut out = [None; 6];
        for (k, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = fields.iter().filter_map(|f| f[k]).collect();
            if vals.len() == reports.len() {
                *slot = Some(fold(&vals));
            }
        }
        Ok(Self::from_fields(out))
    }

    /// Per-metric mean.
    pub fn mean(reports: &[MetricsReport]) -> Result<Self> {
        Self::combine(reports, |v| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Per-metric minimum: each metric picks its own best candidate.
    pub fn best(reports: &[MetricsReport]) -> Result<Self> {
        Self::combine(reports, |v| v.iter().copied().fold(f64::INFINITY, f64::min))
    }
}

/// Mean Euclidean distance over frames and points, in mm.
pub fn mean_point_error(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("metric frames", gt.len(), pred.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(Error::shape("metric points per frame", g.len(), p.len()));
        }
        sum += p.iter().zip(g).map(|(a, b)| (a - b).norm()).sum::<f64>();
        count += p.len();
    }
    if count == 0 {
        return Err(Error::InvalidValue("metric over zero points".into()));
    }
    Ok(1000.0 * sum / count as f64)
}

pub fn mpjpe(pred: &[HumanPose], gt: &[HumanPose]) -> Result<f64> {
    let joints = |s: &[HumanPose]| s.iter().map(|h| h.joints.clone()).collect::<Vec<_>>();
    mean_point_error(&joints(pred), &joints(gt))
}

/// Object keypoint error for poses of the same shape.
pub fn mpjpe_o(pred: &[ObjectPose], gt: &[ObjectPose], shape: &ObjectShape) -> Result<f64> {
    let keypoints = |s: &[ObjectPose]| s.iter().map(|o| shape.posed_keypoints(o)).collect::<Vec<_>>();
    mean_point_error(&keypoints(pred), &keypoints(gt))
}

pub fn trans_err(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    let wrap = |s: &[Vec3]| s.iter().map(|t| vec![*t]).collect::<Vec<_>>();
    mean_point_error(&wrap(pred), &wrap(gt))
}

/// Mean `min(‖q_p − q_g‖₁, ‖q_p + q_g‖₁)`, ×1000.
pub fn rot_err(pred: &[Quaternion<f64>], gt: &[Quaternion<f64>]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("rot_err frames", gt.len(), pred.len()));
    }
    let mut sum = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for q in [p, g] {
            if (q.norm() - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidValue(format!("rot_err needs unit quaternions, got norm {}", q.norm())));
            }
        }
        let minus: f64 = (p.coords - g.coords).iter().map(|v| v.abs()).sum();
        let plus: f64 = (p.coords + g.coords).iter().map(|v| v.abs()).sum();
        sum += minus.min(plus);
    }
    Ok(1000.0 * sum / pred.len() as f64)
}

/// Mean over frames of the fraction of object points with body SDF < 0.
pub fn pene_fraction(human: &[HumanPose], object: &[ObjectPose], shape: &ObjectShape, body: &BodyProxy) -> Result<f64> {
    if shape.is_empty() {
        return Err(Error::EmptyPointCloud("pene_metric"));
    }
    if human.len() != object.len() || human.is_empty() {
        return Err(Error::shape("pene_metric frames", human.len(), object.len()));
    }
    let n = shape.len() as f64;
    let total: f64 = human
        .iter()
        .zip(object)
        .map(|(h, o)| shape.posed(o).iter().filter(|p| body.sdf(h, p) < 0.0).count() as f64 / n)
        .sum();
    Ok(total / human.len() as f64)
}

/// `(fraction, 10⁻² % value)`.
pub fn pene_metric(
    human: &[HumanPose],
    object: &[ObjectPose],
    shape: &ObjectShape,
    body: &BodyProxy,
    mode: CorrectionMode,
) -> Result<(f64, f64)> {
    if mode == CorrectionMode::Skeletal {
        return Err(Error::NotApplicable("Pene needs object vertices and a body surface".into()));
    }
    let f = pene_fraction(human, object, shape, body)?;
    Ok((f, f * 1e4))
}

/// Metrics over the future frames of `pred` against `gt`.
pub fn evaluate(pred: &HoiSequence, gt: &Clip, body: &BodyProxy, mode: CorrectionMode) -> Result<MetricsReport> {
    let (ph, po) = (pred.future_human(), pred.future_object());
    let (gh, go) = (gt.seq.future_human(), gt.seq.future_object());
    if ph.len() != gh.len() {
        return Err(Error::shape("evaluated future frames", gh.len(), ph.len()));
    }
    let trans = |s: &[ObjectPose]| s.iter().map(|o| o.translation).collect::<Vec<_>>();
    let quats = |s: &[ObjectPose]| s.iter().map(|o| o.quaternion().into_inner()).collect::<Vec<_>>();
    let pene = match mode {
        CorrectionMode::Mesh => Some(pene_metric(ph, po, &gt.shape, body, mode)?),
        CorrectionMode::Skeletal => None,
    };
    Ok(MetricsReport {
        mpjpe_h: mpjpe(ph, gh)?,
        mpjpe_o: mpjpe_o(po, go, &gt.shape)?,
        trans_err: trans_err(&trans(po), &trans(go))?,
        rot_err: rot_err(&quats(po), &quats(go))?,
        pene: pene.map(|p| p.1),
        pene_fraction: pene.map(|p| p.0),
    })
}

pub fn candidate_seed(seed: u64, candidate: usize) -> u64 {
    seed.wrapping_mul(0xD134_2543_DE82_EF95).wrapping_add(candidate as u64 + 1)
}

/// `[candidate][clip]` metrics. Candidate `i` samples every clip with
/// `candidate_seed(seed, i)`, so the first `k` candidates of a run with `n`
/// are exactly the candidates of a run with `k`.
pub fn candidate_metrics(
    sampler: &dyn Sampler,
    clips: &[Clip],
    n: usize,
    seed: u64,
    body: &BodyProxy,
    mode: CorrectionMode,
) -> Result<Vec<Vec<MetricsReport>>> {
    if n == 0 {
        return Err(Error::InvalidValue("best-of-many needs at least one candidate".into()));
    }
    let requests: Vec<SampleRequest> = clips.iter().map(SampleRequest::from_clip).collect();
    (0..n)
        .map(|i| {
            let wrap = |e: Error| Error::Candidate {
                candidate: i,
                source: Box::new(e),
            };
            let sampled = sampler.sample(&requests, candidate_seed(seed, i)).map_err(wrap)?;
            sampled
                .sequences
                .iter()
                .zip(clips)
                .map(|(p, g)| evaluate(p, g, body, mode))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)
        })
        .collect()
}

/// Best-of-`k` per clip over the leading `k` candidates.
pub fn best_of(candidates: &[Vec<MetricsReport>], k: usize) -> Result<Vec<MetricsReport>> {
    if k == 0 || k > candidates.len() {
        return Err(Error::InvalidValue(format!("best-of-{k} from {} candidates", candidates.len())));
    }
    let clips = candidates[0].len();
    (0..clips)
        .map(|c| MetricsReport::best(&candidates[..k].iter().map(|row| row[c]).collect::<Vec<_>>()))
        .collect()
}

/// Per-clip Best-of-Many metrics.
pub fn best_of_many(
    sampler: &dyn Sampler,
    clips: &[Clip],
    n: usize,
    seed: u64,
    body: &BodyProxy,
    mode: CorrectionMode,
) -> Result<Vec<MetricsReport>> {
    best_of(&candidate_metrics(sampler, clips, n, seed, body, mode)?, n)
}

/// Long sequences stitched from rounds of the sampler.
#[derive(Debug)]
pub struct Rollout {
    /// Initial past plus every generated frame; empty when the first round failed.
    pub sequences: Vec<HoiSequence>,
    /// Generated frames per sequence.
    pub frames: usize,
    pub rounds: usize,
    pub report: Vec<Vec<CorrectionRecord>>,
    /// Set when a round failed; `sequences` then holds what was finished.
    pub error: Option<Error>,
}

pub fn round_seed(seed: u64, round: usize) -> u64 {
    seed.wrapping_mul(0x9E6C_63D0_676A_9A99).wrapping_add(round as u64)
}

/// Generates `total_frames` after each request's past. Every round conditions
/// on the last `H` frames so far and keeps its whole future (the last round is
/// cut to length), so no frame is generated twice.
pub fn autoregressive_rollout(sampler: &dyn Sampler, initial: &[SampleRequest], total_frames: usize, seed: u64) -> Result<Rollout> {
    let split = sampler.split();
    if total_frames == 0 {
        return Err(Error::InvalidValue("rollout needs at least one frame".into()));
    }
    if initial.iter().any(|r| r.human.len() != split.past || r.object.len() != split.past) {
        return Err(Error::shape("rollout past frames", split.past, "a request of another length"));
    }
    let mut human: Vec<Vec<HumanPose>> = initial.iter().map(|r| r.human.clone()).collect();
    let mut object: Vec<Vec<ObjectPose>> = initial.iter().map(|r| r.object.clone()).collect();
    let mut report = Vec::new();
    let mut produced = 0;
    let mut rounds = 0;
    let mut error = None;
    while produced < total_frames {
        let requests: Vec<SampleRequest> = initial
            .iter()
            .enumerate()
            .map(|(i, r)| SampleRequest {
                human: human[i][human[i].len() - split.past..].to_vec(),
                object: object[i][object[i].len() - split.past..].to_vec(),
                shape: r.shape.clone(),
                fps: r.fps,
            })
            .collect();
        let out = match sampler.sample(&requests, round_seed(seed, rounds)) {
            Ok(out) => out,
            Err(e) => {
                error = Some(e);
                break;
            }
        };
        let take = split.future.min(total_frames - produced);
        for (i, seq) in out.sequences.iter().enumerate() {
            human[i].extend_from_slice(&seq.future_human()[..take]);
            object[i].extend_from_slice(&seq.future_object()[..take]);
        }
        report.push(out.report);
        produced += take;
        rounds += 1;
    }
    let sequences = if produced == 0 {
        Vec::new()
    } else {
        let stitched = Split::new(split.past, produced)?;
        human
            .into_iter()
            .zip(object)
            .zip(initial)
            .map(|((h, o), r)| HoiSequence::new(h, o, r.fps, stitched))
            .collect::<Result<_>>()?
    };
    Ok(Rollout {
        sequences,
        frames: produced,
        rounds,
        report,
        error,
    })
}
