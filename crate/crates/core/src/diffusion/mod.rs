//! Forward noising, the clean-signal reverse step and the sampling loop with
//! an optional correction hook.

pub mod schedule;
pub mod train;

use ndarray::{Array, Array2, Array3, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corrector::CorrectionRecord;
use crate::error::{Error, Result};
pub use schedule::{make_schedule, NoiseSchedule};

/// What the denoiser is conditioned on: normalized past frames and the
/// object's canonical point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    /// `(H, width)`
    pub past: Array2<f64>,
    /// `(N, 3)`
    pub shape_points: Array2<f64>,
}

/// Predicts the clean future `x̃` from a noised one. Inputs and outputs are
/// `(batch, F, width)` with one condition per batch element.
pub trait Denoiser {
    fn denoise(&self, x_t: &Array3<f64>, t: usize, conds: &[Condition]) -> Result<Array3<f64>>;
}

/// Rewrites `x̃` in place during sampling; returns one record per batch
/// element for every step it is consulted on.
pub trait CorrectionHook {
    fn correct(&mut self, t: usize, total: usize, x_tilde: &mut Array3<f64>) -> Result<Vec<CorrectionRecord>>;
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
pub fn q_sample<D: Dimension>(
    x0: &Array<f64, D>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Array<f64, D>,
) -> Result<Array<f64, D>> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape("noise shape", format!("{:?}", x0.shape()), format!("{:?}", noise.shape())));
    }
    check_step(t, schedule, 0)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(x0).and(noise).map_collect(|x, e| a * x + b * e))
}

/// `√ᾱ_{t−1} x̃ + √(1−ᾱ_{t−1}) ε`.
pub fn renoise<D: Dimension>(
    x_tilde: &Array<f64, D>,
    t: usize,
    schedule: &NoiseSchedule,
    noise: &Array<f64, D>,
) -> Result<Array<f64, D>> {
    check_step(t, schedule, 1)?;
    q_sample(x_tilde, t - 1, schedule, noise)
}

fn check_step(t: usize, schedule: &NoiseSchedule, lowest: usize) -> Result<()> {
    if t < lowest || t > schedule.steps() {
        return Err(Error::Index {
            index: t as i64,
            valid: format!("{lowest}..={}", schedule.steps()),
        });
    }
    Ok(())
}

fn call_denoiser(denoiser: &dyn Denoiser, x_t: &Array3<f64>, t: usize, conds: &[Condition]) -> Result<Array3<f64>> {
    if conds.len() != x_t.shape()[0] {
        return Err(Error::shape("conditions per batch", x_t.shape()[0], conds.len()));
    }
    let out = denoiser.denoise(x_t, t, conds)?;
    if out.shape() != x_t.shape() {
        return Err(Error::shape(
            "denoiser output",
            format!("{:?}", x_t.shape()),
            format!("{:?}", out.shape()),
        ));
    }
    Ok(out)
}

/// One reverse step: returns `(x̃, x_{t−1})`.
pub fn reverse_step(
    x_t: &Array3<f64>,
    t: usize,
    denoiser: &dyn Denoiser,
    conds: &[Condition],
    schedule: &NoiseSchedule,
    noise: &Array3<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_step(t, schedule, 1)?;
    let x_tilde = call_denoiser(denoiser, x_t, t, conds)?;
    let prev = renoise(&x_tilde, t, schedule, noise)?;
    Ok((x_tilde, prev))
}

/// Independent noise streams per batch element so a candidate's trajectory
/// does not depend on what it is batched with.
pub struct NoiseStreams {
    rngs: Vec<ChaCha8Rng>,
    frames: usize,
    width: usize,
}

impl NoiseStreams {
    pub fn new(seed: u64, batch: usize, frames: usize, width: usize) -> Self {
        let rngs = (0..batch)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        Self { rngs, frames, width }
    }

    pub fn draw(&mut self) -> Array3<f64> {
        let mut out = Array3::zeros((self.rngs.len(), self.frames, self.width));
        for (b, rng) in self.rngs.iter_mut().enumerate() {
            for v in out.index_axis_mut(ndarray::Axis(0), b).iter_mut() {
                *v = StandardNormal.sample(rng);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// `(batch, F, width)` in the denoiser's (normalized) feature space.
    pub x0: Array3<f64>,
    pub report: Vec<CorrectionRecord>,
}

/// Runs the reverse chain from pure noise for `t = T, ..., 0`. At each step
/// the hook, if any, may rewrite `x̃` before it is re-noised; without a hook
/// this is plain clean-signal DDPM sampling. The `t = 0` pass re-denoises the
/// clean `x_0` and its (possibly corrected) `x̃` is the output, so a late
/// correction is never followed by an unchecked denoiser step.
pub fn sample_with_correction(
    conds: &[Condition],
    future: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    mut hook: Option<&mut dyn CorrectionHook>,
    seed: u64,
) -> Result<SampleOutput> {
    let width = conds
        .first()
        .ok_or_else(|| Error::InvalidValue("sampling needs at least one condition".into()))?
        .past
        .ncols();
    let mut streams = NoiseStreams::new(seed, conds.len(), future, width);
    let total = schedule.steps();
    let mut x = streams.draw();
    let mut report = Vec::new();
    for t in (0..=total).rev() {
        let mut x_tilde = call_denoiser(denoiser, &x, t, conds)?;
        if let Some(h) = hook.as_deref_mut() {
            let records = h.correct(t, total, &mut x_tilde).map_err(|e| Error::Correction {
                step: t,
                source: Box::new(e),
            })?;
            report.extend(records);
        }
        if t == 0 {
            x = x_tilde;
            break;
        }
        let noise = streams.draw();
        x = renoise(&x_tilde, t, schedule, &noise)?;
    }
    Ok(SampleOutput { x0: x, report })
}
