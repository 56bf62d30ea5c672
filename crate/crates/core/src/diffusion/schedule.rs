use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Variance schedule over steps `0..=T` with `β_0 = 0`, so `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from `β_1..β_T`; each must lie in `(0, 1)`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config(format!("diffusion needs T >= 2 steps, got {}", betas.len())));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut all = Vec::with_capacity(betas.len() + 1);
        all.push(0.0);
        all.extend_from_slice(betas);
        let alphas: Vec<f64> = all.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas: all,
            alphas,
            alpha_bars,
        })
    }

    /// `β_t` evenly spaced over `[start, end]` for `t = 1..=T`.
    pub fn linear_range(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs T >= 2 steps, got {steps}")));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(&betas)
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// A named family of β schedules.
pub trait ScheduleKind: Send + Sync {
    fn betas(&self, steps: usize) -> Vec<f64>;
}

/// DDPM's linear range `[1e-4, 0.02]` for 1000 steps, rescaled by `1000 / T`
/// so that shorter chains still end near pure noise.
pub struct ScaledLinear;

impl ScheduleKind for ScaledLinear {
    fn betas(&self, steps: usize) -> Vec<f64> {
        let scale = 1000.0 / steps as f64;
        let (start, end) = (1e-4 * scale, (0.02 * scale).min(0.999));
        (0..steps)
            .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
            .collect()
    }
}

/// Cosine schedule on `ᾱ` with offset `s = 0.008`, betas clipped at 0.999.
pub struct Cosine;

impl ScheduleKind for Cosine {
    fn betas(&self, steps: usize) -> Vec<f64> {
        let f = |t: f64| {
            let s = 0.008;
            ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
            .collect()
    }
}

pub fn schedule_kinds() -> &'static Registry<dyn ScheduleKind> {
    static REGISTRY: OnceLock<Registry<dyn ScheduleKind>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn ScheduleKind> = Registry::new("noise schedule");
        r.register("linear", Box::new(ScaledLinear));
        r.register("cosine", Box::new(Cosine));
        r
    })
}

/// Builds the named schedule with `T` steps; the chain must end within 1% of
/// pure noise.
pub fn make_schedule(steps: usize, kind: &str) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("diffusion needs T >= 2 steps, got {steps}")));
    }
    let sched = NoiseSchedule::from_betas(&schedule_kinds().get(kind)?.betas(steps))?;
    if sched.alpha_bar(steps) >= 0.01 {
        return Err(Error::Config(format!(
            "{kind} schedule with T = {steps} ends at alpha_bar {} (needs < 0.01)",
            sched.alpha_bar(steps)
        )));
    }
    Ok(sched)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_range_product_matches_direct_product() {
        // Direct product over the evenly spaced grid, evaluated independently.
        let direct: f64 = (0..100)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0))
            .product();
        let s = NoiseSchedule::linear_range(100, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(100) - direct).abs() < 1e-15);
        // Frozen oracle value.
        assert!((s.alpha_bar(100) - 0.363_563_248_055_492).abs() < 1e-12);
    }

    #[test]
    fn every_schedule_starts_at_one_and_decreases() {
        for kind in schedule_kinds().names() {
            for steps in [2usize, 10, 100, 1000] {
                let s = make_schedule(steps, kind).unwrap();
                assert_eq!(s.alpha_bar(0), 1.0);
                assert_eq!(s.beta(0), 0.0);
                for t in 1..=steps {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind} T={steps} t={t}");
                }
                assert!(s.alpha_bar(steps) < 0.01);
            }
        }
    }

    #[test]
    fn too_few_steps_and_unknown_kind() {
        assert!(matches!(make_schedule(1, "linear"), Err(Error::Config(_))));
        assert!(matches!(make_schedule(10, "sigmoid"), Err(Error::Unknown { .. })));
    }
}
