//! Clean-signal regression objective with disentangled human/object and
//! velocity terms.

use candle_core::{Tensor, Var};
use candle_nn::Optimizer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::{device, DTYPE};
use crate::types::OBJECT_FEATURES;

/// A denoiser whose forward pass is differentiable.
pub trait TrainableDenoiser {
    /// `x_t: (B, F, W)`, `past: (B, H, W)`, `shapes: (B, N, 3)`, one step per
    /// batch element. Dropout draws from `rng` when given.
    fn forward(
        &self,
        x_t: &Tensor,
        t: &[usize],
        past: &Tensor,
        shapes: &Tensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor>;

    fn vars(&self) -> Vec<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionWeights {
    pub lambda_h: f64,
    pub lambda_o: f64,
    pub lambda_vh: f64,
    pub lambda_vo: f64,
}

impl Default for DiffusionWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_o: 0.1,
            lambda_vh: 0.2,
            lambda_vo: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionLosses {
    pub human: f64,
    pub object: f64,
    pub human_velocity: f64,
    pub object_velocity: f64,
    pub total: f64,
}

/// Clean futures with their conditions, all as tensors.
#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    /// `(B, F, W)`
    pub x0: Tensor,
    /// `(B, H, W)`
    pub past: Tensor,
    /// `(B, N, 3)`
    pub shapes: Tensor,
    pub joints: usize,
}

/// Diffusion steps and Gaussian noise for one batch.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub noise: Tensor,
}

impl NoiseDraw {
    /// `t` uniform in `0..=T`; the sampler's last pass denoises at `t = 0`.
    pub fn sample(batch: &DiffusionBatch, schedule: &NoiseSchedule, rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = batch.x0.dims().to_vec();
        let t = (0..dims[0]).map(|_| rng.random_range(0..=schedule.steps())).collect();
        let n: usize = dims.iter().product();
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Self {
            t,
            noise: Tensor::from_vec(noise, dims, &device())?,
        })
    }
}

fn per_batch(values: Vec<f64>) -> Result<Tensor> {
    let b = values.len();
    Ok(Tensor::from_vec(values, (b, 1, 1), &device())?)
}

/// Tensor form of the closed-form forward process with one step per element.
pub fn q_sample_tensor(x0: &Tensor, t: &[usize], schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let a = per_batch(t.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect())?;
    let b = per_batch(t.iter().map(|&t| (1.0 - schedule.alpha_bar(t)).sqrt()).collect())?;
    Ok((x0.broadcast_mul(&a)? + noise.broadcast_mul(&b)?)?)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

fn velocity(x: &Tensor) -> Result<Option<Tensor>> {
    let f = x.dims()[1];
    if f < 2 {
        return Ok(None);
    }
    Ok(Some((x.narrow(1, 1, f - 1)? - x.narrow(1, 0, f - 1)?)?))
}

fn velocity_mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    match (velocity(pred)?, velocity(target)?) {
        (Some(p), Some(t)) => mse(&p, &t),
        _ => Ok(Tensor::zeros((), DTYPE, &device())?),
    }
}

/// Loss terms for a prediction against the clean future. Velocity terms
/// compare frame differences of prediction and target.
pub fn diffusion_losses(
    pred: &Tensor,
    target: &Tensor,
    joints: usize,
    w: &DiffusionWeights,
) -> Result<(Tensor, DiffusionLosses)> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("prediction", format!("{:?}", target.dims()), format!("{:?}", pred.dims())));
    }
    let hw = joints * 3;
    let split = |x: &Tensor| -> Result<(Tensor, Tensor)> {
        Ok((x.narrow(2, 0, hw)?, x.narrow(2, hw, OBJECT_FEATURES)?))
    };
    let (ph, po) = split(pred)?;
    let (th, to) = split(target)?;
    let lh = mse(&ph, &th)?;
    let lo = mse(&po, &to)?;
    let lvh = velocity_mse(&ph, &th)?;
    let lvo = velocity_mse(&po, &to)?;
    let total = ((((&lh * w.lambda_h)? + (&lo * w.lambda_o)?)? + (&lvh * w.lambda_vh)?)? + (&lvo * w.lambda_vo)?)?;
    let v = |t: &Tensor| t.to_scalar::<f64>();
    let losses = DiffusionLosses {
        human: v(&lh)?,
        object: v(&lo)?,
        human_velocity: v(&lvh)?,
        object_velocity: v(&lvo)?,
        total: v(&total)?,
    };
    Ok((total, losses))
}

/// Differentiable objective for one batch and noise draw.
pub fn diffusion_objective(
    model: &dyn TrainableDenoiser,
    batch: &DiffusionBatch,
    draw: &NoiseDraw,
    schedule: &NoiseSchedule,
    weights: &DiffusionWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, DiffusionLosses)> {
    let x_t = q_sample_tensor(&batch.x0, &draw.t, schedule, &draw.noise)?;
    let pred = model.forward(&x_t, &draw.t, &batch.past, &batch.shapes, rng)?;
    diffusion_losses(&pred, &batch.x0, batch.joints, weights)
}

/// Samples steps and noise, evaluates the objective and applies one
/// optimizer update.
pub fn train_diffusion_step<O: Optimizer>(
    model: &dyn TrainableDenoiser,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
    weights: &DiffusionWeights,
    optimizer: &mut O,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<DiffusionLosses> {
    let draw = NoiseDraw::sample(batch, schedule, rng)?;
    let (total, losses) = diffusion_objective(model, batch, &draw, schedule, weights, Some(rng))?;
    if !losses.total.is_finite() {
        return Err(Error::Training {
            step,
            detail: format!("non-finite diffusion loss {losses:?} at steps {:?}", draw.t),
        });
    }
    optimizer.backward_step(&total)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn target(b: usize, f: usize, joints: usize, seed: u64) -> Tensor {
        let w = joints * 3 + OBJECT_FEATURES;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * f * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, f, w), &device()).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let x = target(2, 5, 2, 0);
        let (_, l) = diffusion_losses(&x, &x, 2, &DiffusionWeights::default()).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn total_is_weighted_sum() {
        let x = target(3, 4, 2, 1);
        let y = target(3, 4, 2, 2);
        let w = DiffusionWeights::default();
        let (_, l) = diffusion_losses(&x, &y, 2, &w).unwrap();
        let sum = w.lambda_h * l.human + w.lambda_o * l.object + w.lambda_vh * l.human_velocity + w.lambda_vo * l.object_velocity;
        assert!((l.total - sum).abs() < 1e-9);
        let only_h = DiffusionWeights { lambda_h: 1.0, lambda_o: 0.0, lambda_vh: 0.0, lambda_vo: 0.0 };
        let (_, l) = diffusion_losses(&x, &y, 2, &only_h).unwrap();
        assert_eq!(l.total, l.human);
    }

    #[test]
    fn human_loss_matches_direct_mean() {
        let x = target(1, 2, 2, 3);
        let y = target(1, 2, 2, 4);
        let (_, l) = diffusion_losses(&x, &y, 2, &DiffusionWeights::default()).unwrap();
        let xv: Vec<Vec<f64>> = x.squeeze(0).unwrap().to_vec2().unwrap();
        let yv: Vec<Vec<f64>> = y.squeeze(0).unwrap().to_vec2().unwrap();
        let mut s = 0.0;
        for f in 0..2 {
            for k in 0..6 {
                s += (xv[f][k] - yv[f][k]).powi(2);
            }
        }
        assert!((l.human - s / 12.0).abs() < 1e-12);
    }
}
