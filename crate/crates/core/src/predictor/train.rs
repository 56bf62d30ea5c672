//! Predictor objective: world-frame object and velocity terms over the
//! recovered past and predicted future, plus contact and penetration terms on
//! the predicted future.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};
use candle_nn::Optimizer;
use nalgebra::Matrix3;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{pad_last_frame, PredictorConfig, ReferencePolicy, TrainablePredictor};
use crate::body::BodyProxy;
use crate::error::{Error, Result};
use crate::frames::{build_st_graph, AnchorTracks, OrientationMode};
use crate::geometry::{contact_points, contact_state, object_points, select_reference, ContactMode, ReferenceChoice};
use crate::nn::{device, DTYPE};
use crate::rotation::Vec3;
use crate::shape::ObjectShape;
use crate::types::{HoiSequence, ObjectPose, OBJECT_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorWeights {
    pub lambda_o: f64,
    pub lambda_vo: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
}

impl Default for PredictorWeights {
    fn default() -> Self {
        Self {
            lambda_o: 1.0,
            lambda_vo: 0.1,
            lambda_c: 1.0,
            lambda_p: 0.1,
        }
    }
}

impl PredictorWeights {
    /// Skeleton-only data has no surface to touch or penetrate.
    pub fn skeletal() -> Self {
        Self {
            lambda_c: 0.0,
            lambda_p: 0.0,
            ..Self::default()
        }
    }

    pub fn for_mode(mode: ContactMode) -> Self {
        match mode {
            ContactMode::Marker => Self::default(),
            ContactMode::Joint => Self::skeletal(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorLosses {
    pub object: f64,
    pub object_velocity: f64,
    pub contact: f64,
    pub penetration: f64,
    pub total: f64,
}

/// One training window, everything precomputed from the ground truth.
#[derive(Debug, Clone)]
pub struct PredictorSample {
    /// `(H+F, nodes, 9)`
    pub padded: Array3<f64>,
    pub reference: ReferenceChoice,
    /// World features are `blockdiag(R, R, R) · rel + (0, 0, a)` per frame.
    pub world_rotation: Vec<Matrix3<f64>>,
    pub world_offset: Vec<Vec3>,
    /// `(H+F, 9)`
    pub target: Array2<f64>,
    /// `(future frame, contact point)` for every pair within the contact
    /// threshold in the ground truth.
    pub contact_pairs: Vec<(usize, Vec3)>,
    /// Canonical object points used for contact, `(Q, 3)`.
    pub contact_cloud: Array2<f64>,
    /// Canonical subset checked for penetration, `(K, 3)`.
    pub penetration_cloud: Array2<f64>,
    /// Capsule endpoints per future frame, `(F, bones, 6)`.
    pub bones: Array3<f64>,
    pub radii: Vec<f64>,
    pub past: usize,
}

fn cloud(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k])
}

/// Evenly strided subset of at most `k` points.
pub fn strided<T: Clone>(points: &[T], k: usize) -> Vec<T> {
    if k >= points.len() {
        return points.to_vec();
    }
    (0..k).map(|i| points[i * points.len() / k].clone()).collect()
}

impl PredictorSample {
    pub fn from_window(seq: &HoiSequence, shape: &ObjectShape, body: &BodyProxy, config: &PredictorConfig) -> Result<Self> {
        let h = seq.split.past;
        let n = seq.frames();
        let mode = config.contact;
        let graph = build_st_graph(&seq.human[..h], &seq.object[..h], body, mode, config.orientation)?;
        let padded = pad_last_frame(&graph.features, n);

        let c = contact_state(&seq.human[h..], &seq.object[h..], shape, body, mode)?;
        let reference = match config.reference {
            ReferencePolicy::Selected => select_reference(&c, config.eps_contact),
            ReferencePolicy::Ground => ReferenceChoice::Ground,
        };

        let (world_rotation, world_offset) = match reference {
            ReferenceChoice::Ground => (vec![Matrix3::identity(); n], vec![Vec3::zeros(); n]),
            ReferenceChoice::Point(j) => {
                let anchors = AnchorTracks::compute(&seq.human, body, mode);
                let rot = match config.orientation {
                    OrientationMode::TranslationOnly => vec![Matrix3::identity(); n],
                    OrientationMode::BoneFrame => anchors.frame_track(j).iter().map(|r| *r.matrix()).collect(),
                };
                (rot, anchors.track(j))
            }
        };

        let target = Array2::from_shape_fn((n, OBJECT_FEATURES), |(f, k)| seq.object[f].features()[k]);
        let future = seq.split.future;
        let mut contact_pairs = Vec::new();
        for (f, hp) in seq.human[h..].iter().enumerate() {
            for (j, p) in contact_points(hp, body, mode).into_iter().enumerate() {
                if c.distances[(f, j)] < config.eps_contact {
                    contact_pairs.push((f, p));
                }
            }
        }
        let contact_cloud = cloud(&object_points(shape, &ObjectPose::identity(), mode));
        let penetration_cloud = cloud(&strided(&shape.points, config.penetration_points));

        let sk = &body.skeleton;
        let mut bones = Array3::zeros((future, sk.bone_count(), 6));
        for (f, hp) in seq.human[h..].iter().enumerate() {
            for b in 0..sk.bone_count() {
                let (p, q) = sk.bone_joints(b);
                for k in 0..3 {
                    bones[(f, b, k)] = hp.joints[p][k];
                    bones[(f, b, 3 + k)] = hp.joints[q][k];
                }
            }
        }
        Ok(Self {
            padded,
            reference,
            world_rotation,
            world_offset,
            target,
            contact_pairs,
            contact_cloud,
            penetration_cloud,
            bones,
            radii: sk.capsule_radii.clone(),
            past: h,
        })
    }
}

/// Stacked samples as tensors.
#[derive(Debug, Clone)]
pub struct PredictorBatch {
    pub padded: Tensor,
    pub node_mask: Tensor,
    pub world_linear: Tensor,
    pub world_offset: Tensor,
    pub target: Tensor,
    pub contact: Option<ContactPairs>,
    /// `(B, Q, 3)`
    pub contact_cloud: Tensor,
    /// `(B, K, 3)`
    pub penetration_cloud: Tensor,
    pub bones: BoneTerms,
    pub past: usize,
}

/// Near-contact pairs gathered across the batch.
#[derive(Debug, Clone)]
pub struct ContactPairs {
    /// `(M,)` rows of the flattened `(B·F)` future.
    pub frame: Tensor,
    /// `(M,)` batch element of each pair.
    pub sample: Tensor,
    /// `(M, 3, 1)` contact point positions.
    pub point: Tensor,
}

/// Capsules per future frame. Penetration depth against them is a fused op
/// with its own gradient; as broadcast tensor ops it dominated a step.
#[derive(Debug, Clone)]
pub struct BoneTerms {
    /// `(B, F, bones, 6)` start and end points.
    ends: Arc<Vec<f64>>,
    /// `(B, bones)`
    radii: Arc<Vec<f64>>,
    frames: usize,
    bones: usize,
}

impl BoneTerms {
    fn new(samples: &[PredictorSample]) -> Result<Self> {
        let (f, nb, _) = samples[0].bones.dim();
        let mut ends = Vec::with_capacity(samples.len() * f * nb * 6);
        let mut radii = Vec::with_capacity(samples.len() * nb);
        for smp in samples {
            if smp.bones.dim() != (f, nb, 6) || smp.radii.len() != nb {
                return Err(Error::shape("bone endpoints", format!("({f}, {nb}, 6)"), format!("{:?}", smp.bones.dim())));
            }
            ends.extend(smp.bones.iter().copied());
            radii.extend(smp.radii.iter().copied());
        }
        Ok(Self {
            ends: Arc::new(ends),
            radii: Arc::new(radii),
            frames: f,
            bones: nb,
        })
    }

    /// Per-point depth `relu(−min_bone(dist − r))` for posed points `(B, F, K, 3)`.
    pub fn depth(&self, points: &Tensor) -> Result<Tensor> {
        Ok(points.contiguous()?.apply_op1(self.clone())?)
    }

    /// Depth of `p` and the unit direction from the nearest capsule axis
    /// point towards `p`.
    fn nearest(&self, b: usize, f: usize, p: [f64; 3]) -> (f64, [f64; 3]) {
        let mut best = (f64::INFINITY, [0.0; 3]);
        let base = (b * self.frames + f) * self.bones * 6;
        for j in 0..self.bones {
            let e = &self.ends[base + j * 6..base + j * 6 + 6];
            let s = [e[3] - e[0], e[4] - e[1], e[5] - e[2]];
            let rel = [p[0] - e[0], p[1] - e[1], p[2] - e[2]];
            let ss = s[0] * s[0] + s[1] * s[1] + s[2] * s[2];
            let t = if ss > 1e-24 { ((rel[0] * s[0] + rel[1] * s[1] + rel[2] * s[2]) / ss).clamp(0.0, 1.0) } else { 0.0 };
            let off = [rel[0] - t * s[0], rel[1] - t * s[1], rel[2] - t * s[2]];
            let d = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
            let sdf = d - self.radii[b * self.bones + j];
            if sdf < best.0 {
                let dir = if d > 1e-12 { [off[0] / d, off[1] / d, off[2] / d] } else { [0.0; 3] };
                best = (sdf, dir);
            }
        }
        ((-best.0).max(0.0), best.1)
    }

    fn dims(&self, shape: &[usize]) -> candle_core::Result<(usize, usize, usize)> {
        match *shape {
            [b, f, k, 3] if f == self.frames && b * f * self.bones * 6 == self.ends.len() => Ok((b, f, k)),
            _ => candle_core::bail!("capsule depth expects (B, {}, K, 3), got {shape:?}", self.frames),
        }
    }
}

impl CustomOp1 for BoneTerms {
    fn name(&self) -> &'static str {
        "capsule-depth"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, f, k) = self.dims(layout.dims())?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("capsule depth needs contiguous input".into()))?;
        let data = &storage.as_slice::<f64>()?[start..end];
        let out = data
            .chunks_exact(3)
            .enumerate()
            .map(|(i, p)| self.nearest(i / (f * k), (i / k) % f, [p[0], p[1], p[2]]).0)
            .collect();
        Ok((CpuStorage::F64(out), Shape::from((b, f, k))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, f, k) = self.dims(arg.dims())?;
        let points = arg.flatten_all()?.to_vec1::<f64>()?;
        let upstream = grad_res.flatten_all()?.to_vec1::<f64>()?;
        let mut grad = vec![0.0; points.len()];
        for (i, p) in points.chunks_exact(3).enumerate() {
            let (depth, dir) = self.nearest(i / (f * k), (i / k) % f, [p[0], p[1], p[2]]);
            if depth > 0.0 {
                for c in 0..3 {
                    grad[3 * i + c] = -upstream[i] * dir[c];
                }
            }
        }
        Ok(Some(Tensor::from_vec(grad, arg.shape(), arg.device())?))
    }
}

fn stack_arrays<A: Clone + ndarray::Dimension>(arrays: Vec<ndarray::Array<f64, A>>, what: &'static str) -> Result<Tensor> {
    let first = arrays[0].shape().to_vec();
    let mut data = Vec::with_capacity(arrays.len() * arrays[0].len());
    for a in &arrays {
        if a.shape() != first.as_slice() {
            return Err(Error::shape(what, format!("{first:?}"), format!("{:?}", a.shape())));
        }
        data.extend(a.iter().copied());
    }
    let mut dims = vec![arrays.len()];
    dims.extend(first);
    Ok(Tensor::from_vec(data, dims, &device())?)
}

fn shrink_cloud(c: &Array2<f64>, k: usize) -> Array2<f64> {
    let rows: Vec<usize> = strided(&(0..c.nrows()).collect::<Vec<_>>(), k);
    c.select(ndarray::Axis(0), &rows)
}

impl PredictorBatch {
    /// Point clouds of differing sizes are thinned to the smallest one.
    pub fn stack(samples: &[PredictorSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidValue("empty predictor batch".into()));
        };
        let (n, nodes, _) = first.padded.dim();
        let mut node_mask = Array3::<f64>::zeros((samples.len(), nodes, 1));
        let mut linear = Vec::with_capacity(samples.len());
        let mut offset = Vec::with_capacity(samples.len());
        for (i, smp) in samples.iter().enumerate() {
            if smp.past != first.past || smp.world_rotation.len() != n || smp.reference.node() >= nodes {
                return Err(Error::shape("predictor sample", format!("H={} over {n} frames", first.past), format!("H={}", smp.past)));
            }
            node_mask[(i, smp.reference.node(), 0)] = 1.0;
            let mut m = Array3::<f64>::zeros((n, OBJECT_FEATURES, OBJECT_FEATURES));
            let mut o = Array2::<f64>::zeros((n, OBJECT_FEATURES));
            for f in 0..n {
                let r = &smp.world_rotation[f];
                for blk in 0..3 {
                    for a in 0..3 {
                        for b in 0..3 {
                            m[(f, 3 * blk + a, 3 * blk + b)] = r[(a, b)];
                        }
                    }
                }
                for k in 0..3 {
                    o[(f, 6 + k)] = smp.world_offset[f][k];
                }
            }
            linear.push(m);
            offset.push(o);
        }
        let q = samples.iter().map(|s| s.contact_cloud.nrows()).min().unwrap_or(0);
        let k = samples.iter().map(|s| s.penetration_cloud.nrows()).min().unwrap_or(0);
        if q == 0 || k == 0 {
            return Err(Error::EmptyPointCloud("predictor batch"));
        }
        let b = samples.len();
        let future = n - first.past;
        let (mut frame, mut sample, mut point) = (Vec::new(), Vec::new(), Vec::new());
        for (i, smp) in samples.iter().enumerate() {
            for (f, p) in &smp.contact_pairs {
                frame.push((i * future + f) as u32);
                sample.push(i as u32);
                point.extend([p.x, p.y, p.z]);
            }
        }
        let m = frame.len();
        let contact = if m == 0 {
            None
        } else {
            Some(ContactPairs {
                frame: Tensor::from_vec(frame, m, &device())?,
                sample: Tensor::from_vec(sample, m, &device())?,
                point: Tensor::from_vec(point, (m, 3, 1), &device())?,
            })
        };
        Ok(Self {
            padded: stack_arrays(samples.iter().map(|s| s.padded.clone()).collect(), "padded graph")?,
            node_mask: Tensor::from_vec(node_mask.iter().copied().collect(), (b, 1, nodes, 1), &device())?,
            world_linear: stack_arrays(linear, "world map")?,
            world_offset: stack_arrays(offset, "world offset")?,
            target: stack_arrays(samples.iter().map(|s| s.target.clone()).collect(), "target")?,
            contact,
            contact_cloud: stack_arrays(samples.iter().map(|s| shrink_cloud(&s.contact_cloud, q)).collect(), "contact cloud")?,
            penetration_cloud: stack_arrays(samples.iter().map(|s| shrink_cloud(&s.penetration_cloud, k)).collect(), "penetration cloud")?,
            bones: BoneTerms::new(samples)?,
            past: first.past,
        })
    }

    pub fn len(&self) -> usize {
        self.padded.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn dot3(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.broadcast_mul(b)?.sum_keepdim(D::Minus1)?)
}

fn safe_norm(x: &Tensor) -> Result<Tensor> {
    Ok((x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?)
}

fn cross(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = |t: &Tensor, i: usize| t.narrow(D::Minus1, i, 1);
    let (a0, a1, a2) = (c(a, 0)?, c(a, 1)?, c(a, 2)?);
    let (b0, b1, b2) = (c(b, 0)?, c(b, 1)?, c(b, 2)?);
    Ok(Tensor::cat(
        &[
            ((&a1 * &b2)? - (&a2 * &b1)?)?,
            ((&a2 * &b0)? - (&a0 * &b2)?)?,
            ((&a0 * &b1)? - (&a1 * &b0)?)?,
        ],
        D::Minus1,
    )?)
}

/// Rotation matrices `(…, 3, 3)` from 6D features by Gram-Schmidt.
pub fn rotation_tensor(features: &Tensor) -> Result<Tensor> {
    let a = features.narrow(D::Minus1, 0, 3)?;
    let b = features.narrow(D::Minus1, 3, 3)?;
    let c0 = a.broadcast_div(&safe_norm(&a)?)?;
    let ortho = (&b - c0.broadcast_mul(&dot3(&c0, &b)?)?)?;
    let c1 = ortho.broadcast_div(&safe_norm(&ortho)?)?;
    let c2 = cross(&c0, &c1)?;
    Ok(Tensor::stack(&[c0, c1, c2], D::Minus1)?)
}

/// `(B, Q, 3)` canonical points posed by `(B, F, 9)` features → `(B, F, Q, 3)`.
fn pose_cloud(cloud: &Tensor, features: &Tensor) -> Result<Tensor> {
    let r = rotation_tensor(features)?;
    let t = features.narrow(D::Minus1, 6, 3)?.unsqueeze(2)?;
    let posed = cloud.unsqueeze(1)?.broadcast_matmul(&r.transpose(2, 3)?.contiguous()?)?;
    Ok(posed.broadcast_add(&t)?)
}

/// Replaces the 6D part of `(…, 9)` features by its Gram-Schmidt columns.
pub fn orthonormalize_features(features: &Tensor) -> Result<Tensor> {
    let r = rotation_tensor(features)?;
    let c = |k: usize| r.narrow(D::Minus1, k, 1).and_then(|t| t.squeeze(D::Minus1));
    Ok(Tensor::cat(&[c(0)?, c(1)?, features.narrow(D::Minus1, 6, 3)?], D::Minus1)?)
}

/// Predicted full-length world features `(B, H+F, 9)` under each sample's
/// reference, with orthonormal rotation columns as used at inference.
pub fn world_prediction(model: &dyn TrainablePredictor, batch: &PredictorBatch) -> Result<Tensor> {
    let full = model.forward(&batch.padded, batch.past)?;
    let rel = orthonormalize_features(&full.broadcast_mul(&batch.node_mask)?.sum(2)?)?;
    let world = batch.world_linear.matmul(&rel.unsqueeze(3)?.contiguous()?)?.squeeze(3)?;
    Ok((world + &batch.world_offset)?)
}

pub fn predictor_losses(world: &Tensor, batch: &PredictorBatch, w: &PredictorWeights) -> Result<(Tensor, PredictorLosses)> {
    let (_, n, _) = world.dims3()?;
    let h = batch.past;
    let f = n - h;
    let fut = world.narrow(1, h, f)?;
    let lo = mse(world, &batch.target)?;
    let vel = |x: &Tensor| -> Result<Tensor> { Ok((x.narrow(1, 1, n - 1)? - x.narrow(1, 0, n - 1)?)?) };
    let lvo = mse(&vel(world)?, &vel(&batch.target)?)?;
    let zero = || Tensor::zeros((), DTYPE, &device());

    let lc = match &batch.contact {
        Some(pairs) if w.lambda_c != 0.0 => {
            let (b, _, _) = batch.contact_cloud.dims3()?;
            let rows = fut.contiguous()?.reshape((b * f, OBJECT_FEATURES))?.index_select(&pairs.frame, 0)?;
            let clouds = batch.contact_cloud.index_select(&pairs.sample, 0)?;
            let r = rotation_tensor(&rows)?;
            let obj = clouds.matmul(&r.transpose(1, 2)?.contiguous()?)?.broadcast_add(&rows.narrow(1, 6, 3)?.unsqueeze(1)?)?;
            let m2 = pairs.point.sqr()?.sum_keepdim(1)?;
            let d2 = (obj.sqr()?.sum_keepdim(2)?.broadcast_add(&m2)? - (obj.matmul(&pairs.point)? * 2.0)?)?;
            (d2.relu()? + 1e-12)?.sqrt()?.min(1)?.mean_all()?
        }
        _ => zero()?,
    };

    let lp = if w.lambda_p != 0.0 {
        let p = pose_cloud(&batch.penetration_cloud, &fut)?;
        batch.bones.depth(&p)?.sum(2)?.mean_all()?
    } else {
        zero()?
    };

    let total = ((((&lo * w.lambda_o)? + (&lvo * w.lambda_vo)?)? + (&lc * w.lambda_c)?)? + (&lp * w.lambda_p)?)?;
    let v = |t: &Tensor| t.to_scalar::<f64>();
    let losses = PredictorLosses {
        object: v(&lo)?,
        object_velocity: v(&lvo)?,
        contact: v(&lc)?,
        penetration: v(&lp)?,
        total: v(&total)?,
    };
    Ok((total, losses))
}

pub fn predictor_objective(model: &dyn TrainablePredictor, batch: &PredictorBatch, w: &PredictorWeights) -> Result<(Tensor, PredictorLosses)> {
    predictor_losses(&world_prediction(model, batch)?, batch, w)
}

pub fn train_predictor_step<O: Optimizer>(
    model: &dyn TrainablePredictor,
    batch: &PredictorBatch,
    weights: &PredictorWeights,
    optimizer: &mut O,
    step: usize,
) -> Result<PredictorLosses> {
    let (total, losses) = predictor_objective(model, batch, weights)?;
    if !losses.total.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("non-finite predictor loss {losses:?}"),
        });
    }
    optimizer.backward_step(&total)?;
    Ok(losses)
}

/// One element of a world prediction as an `(H+F, 9)` array.
pub fn world_array(world: &Tensor, element: usize) -> Result<Array2<f64>> {
    let (_, n, k) = world.dims3()?;
    let v = world.get(element)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((n, k), v).map_err(|e| Error::InvalidValue(e.to_string()))
}
