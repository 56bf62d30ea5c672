//! Training drivers: canonical windows, minibatching and AdamW loops for the
//! denoiser and the interaction predictor.

use std::path::Path;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{s, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::body::BodyProxy;
use crate::data::norm::{fit_norm_stats, NormStats};
use crate::data::Clip;
use crate::denoiser::{DenoiserConfig, DenoiserNet};
use crate::diffusion::train::{train_diffusion_step, DiffusionBatch, DiffusionLosses, DiffusionWeights, TrainableDenoiser};
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::device;
use crate::pipeline::{canonicalize, CanonicalConfig, Correction, InterDiffSampler};
use crate::predictor::train::{strided, train_predictor_step, PredictorBatch, PredictorLosses, PredictorSample, PredictorWeights};
use crate::predictor::{PredictorConfig, StgnnModel, TrainablePredictor};
use crate::types::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay ends at `lr · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Frames between consecutive training windows of one clip.
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            final_lr_fraction: 0.1,
            weight_decay: 0.0,
            seed: 0,
            window_stride: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("batch_size and window_stride must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let floor = self.lr * self.final_lr_fraction;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }

    fn optimizer(&self, vars: Vec<candle_core::Var>) -> Result<AdamW> {
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
        )?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    #[serde(rename = "T")]
    pub steps: usize,
    pub schedule: String,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            steps: 100,
            schedule: "linear".into(),
        }
    }
}

/// Canonicalized windows of `split` frames, starting every `stride` frames.
pub fn training_windows(clips: &[Clip], split: Split, stride: usize, body: &BodyProxy, canonical: CanonicalConfig) -> Result<Vec<Clip>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let mut out = Vec::new();
    for clip in clips {
        let frames = clip.seq.frames();
        if frames < split.total() {
            continue;
        }
        for start in (0..=frames - split.total()).step_by(stride) {
            let (seq, _) = canonicalize(&clip.seq.window(start, split)?, body, canonical)?;
            out.push(Clip {
                seq,
                shape: clip.shape.clone(),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidValue(format!("no clip is long enough for {} frames", split.total())));
    }
    Ok(out)
}

/// A trained denoiser with everything needed to sample from it.
pub struct DenoiserBundle {
    pub net: DenoiserNet,
    pub norm: NormStats,
    pub schedule: NoiseSchedule,
    pub diffusion: DiffusionSettings,
    pub split: Split,
    pub canonical: CanonicalConfig,
}

impl DenoiserBundle {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let extra = serde_json::json!({
            "norm": self.norm,
            "diffusion": self.diffusion,
            "split": self.split,
            "canonical": self.canonical,
        });
        self.net.save(path, extra)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, extra) = DenoiserNet::load(path)?;
        let field = |k: &str| extra.get(k).cloned().ok_or_else(|| Error::parse("checkpoint header extra", format!("missing {k:?}")));
        let bad = |e: serde_json::Error| Error::parse("checkpoint header extra", e.to_string());
        let norm: NormStats = serde_json::from_value(field("norm")?).map_err(bad)?;
        let diffusion: DiffusionSettings = serde_json::from_value(field("diffusion")?).map_err(bad)?;
        let split: Split = serde_json::from_value(field("split")?).map_err(bad)?;
        let canonical: CanonicalConfig = serde_json::from_value(field("canonical")?).map_err(bad)?;
        if norm.width() != net.width() {
            return Err(Error::shape("normalizer width", net.width(), norm.width()));
        }
        Ok(Self {
            schedule: make_schedule(diffusion.steps, &diffusion.schedule)?,
            net,
            norm,
            diffusion,
            split,
            canonical,
        })
    }

    pub fn sampler<'a>(&'a self, body: &'a BodyProxy, correction: Option<Correction<'a>>) -> InterDiffSampler<'a> {
        InterDiffSampler {
            denoiser: &self.net,
            schedule: &self.schedule,
            norm: &self.norm,
            body,
            split: self.split,
            canonical: self.canonical,
            correction,
        }
    }
}

/// Saves a predictor with the canonical frame its windows were built in.
pub fn save_predictor(model: &StgnnModel, canonical: CanonicalConfig, path: impl AsRef<Path>) -> Result<()> {
    model.save(path, serde_json::json!({ "canonical": canonical }))
}

pub fn load_predictor(path: impl AsRef<Path>) -> Result<(StgnnModel, CanonicalConfig)> {
    let (model, extra) = StgnnModel::load(path)?;
    let canonical = serde_json::from_value(extra.get("canonical").cloned().unwrap_or_default())
        .map_err(|e| Error::parse("checkpoint header extra.canonical", e.to_string()))?;
    Ok((model, canonical))
}

fn stack_rows(rows: &[Array2<f64>], indices: &[usize]) -> Result<Tensor> {
    let (n, w) = rows[indices[0]].dim();
    let data: Vec<f64> = indices.iter().flat_map(|&i| rows[i].iter().copied()).collect();
    Ok(Tensor::from_vec(data, (indices.len(), n, w), &device())?)
}

/// Without replacement when the population allows it; small populations are
/// drawn with replacement so every batch is full.
fn batch_indices(rng: &mut ChaCha8Rng, population: usize, batch: usize) -> Vec<usize> {
    if population >= batch {
        sample(rng, population, batch).into_vec()
    } else {
        (0..batch).map(|_| rng.random_range(0..population)).collect()
    }
}

/// Windows already canonicalized and of one split. Calls `progress` after
/// every step.
pub fn train_denoiser(
    windows: &[Clip],
    config: DenoiserConfig,
    diffusion: &DiffusionSettings,
    weights: &DiffusionWeights,
    train: &TrainConfig,
    canonical: CanonicalConfig,
    progress: &mut dyn FnMut(usize, &DiffusionLosses),
) -> Result<DenoiserBundle> {
    train.validate()?;
    let first = windows.first().ok_or_else(|| Error::InvalidValue("no training windows".into()))?;
    let split = first.seq.split;
    let joints = first.seq.joint_count();
    let schedule = make_schedule(diffusion.steps, &diffusion.schedule)?;
    let seqs: Vec<_> = windows.iter().map(|c| c.seq.clone()).collect();
    if seqs.iter().any(|s| s.split != split || s.joint_count() != joints) {
        return Err(Error::InvalidValue("training windows differ in split or joint count".into()));
    }
    let norm = fit_norm_stats(&seqs)?;
    let normalized: Vec<Array2<f64>> = seqs.iter().map(|s| norm.normalize(s.flatten().view())).collect::<Result<_>>()?;
    let past: Vec<Array2<f64>> = normalized.iter().map(|z| z.slice(s![..split.past, ..]).to_owned()).collect();
    let future: Vec<Array2<f64>> = normalized.iter().map(|z| z.slice(s![split.past.., ..]).to_owned()).collect();
    let points = windows.iter().map(|c| c.shape.points.len()).min().unwrap_or(0);
    if points == 0 {
        return Err(Error::EmptyPointCloud("training shapes"));
    }
    let shapes: Vec<Array2<f64>> = windows
        .iter()
        .map(|c| {
            let p = strided(&c.shape.points, points);
            Array2::from_shape_fn((points, 3), |(i, k)| p[i][k])
        })
        .collect();

    let net = DenoiserNet::new(config, norm.width())?;
    let mut opt = train.optimizer(net.vars())?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    for step in 0..train.steps {
        opt.set_learning_rate(train.lr_at(step));
        let idx = batch_indices(&mut rng, windows.len(), train.batch_size);
        let batch = DiffusionBatch {
            x0: stack_rows(&future, &idx)?,
            past: stack_rows(&past, &idx)?,
            shapes: stack_rows(&shapes, &idx)?,
            joints,
        };
        let losses = train_diffusion_step(&net, &batch, &schedule, weights, &mut opt, &mut rng, step)?;
        progress(step, &losses);
    }
    Ok(DenoiserBundle {
        net,
        norm,
        schedule,
        diffusion: diffusion.clone(),
        split,
        canonical,
    })
}

/// Precomputed predictor samples for canonical windows.
pub fn predictor_samples(windows: &[Clip], config: &PredictorConfig, body: &BodyProxy) -> Result<Vec<PredictorSample>> {
    windows.iter().map(|c| PredictorSample::from_window(&c.seq, &c.shape, body, config)).collect()
}

pub fn train_predictor(
    samples: &[PredictorSample],
    config: PredictorConfig,
    weights: &PredictorWeights,
    train: &TrainConfig,
    body: &BodyProxy,
    progress: &mut dyn FnMut(usize, &PredictorLosses),
) -> Result<StgnnModel> {
    train.validate()?;
    let first = samples.first().ok_or_else(|| Error::InvalidValue("no predictor samples".into()))?;
    let frames = first.padded.dim().0;
    let split = Split::new(first.past, frames - first.past)?;
    let nodes = 1 + config.contact.point_count(body);
    let model = StgnnModel::new(config, nodes, split)?;
    let mut opt = train.optimizer(model.vars())?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    for step in 0..train.steps {
        opt.set_learning_rate(train.lr_at(step));
        let idx = batch_indices(&mut rng, samples.len(), train.batch_size);
        let chosen: Vec<PredictorSample> = idx.iter().map(|&i| samples[i].clone()).collect();
        let batch = PredictorBatch::stack(&chosen)?;
        let losses = train_predictor_step(&model, &batch, weights, &mut opt, step)?;
        progress(step, &losses);
    }
    Ok(model)
}
