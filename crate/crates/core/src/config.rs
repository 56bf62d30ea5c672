//! Run configuration: one TOML (or JSON) document with a section per stage.
//! Every section and key is optional; missing ones take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body::BodyProxy;
use crate::corrector::{schedulers, CorrectionMode, CorrectorConfig, Scheduler};
use crate::data::io::load_dir;
use crate::data::synthetic::generate_corpus;
use crate::data::Clip;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::train::DiffusionWeights;
use crate::error::{Error, Result};
use crate::frames::OrientationMode;
use crate::pipeline::CanonicalConfig;
use crate::predictor::train::PredictorWeights;
use crate::predictor::{PredictorConfig, ReferencePolicy};
use crate::training::{DiffusionSettings, TrainConfig};
use crate::types::Split;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of sequence files; when unset a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub kinds: Vec<String>,
    pub count: usize,
    pub frames: usize,
    pub seed: u64,
    pub split: Split,
    /// Body definition (JSON); the built-in humanoid when unset.
    pub body: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            kinds: ["carry", "swing", "release", "push", "no_contact"].map(String::from).to_vec(),
            count: 200,
            frames: 60,
            seed: 0,
            split: Split::default(),
            body: None,
        }
    }
}

impl DataConfig {
    pub fn body(&self) -> Result<BodyProxy> {
        match &self.body {
            None => Ok(BodyProxy::default_humanoid()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| Error::parse(p.display().to_string(), e.to_string()))
            }
        }
    }

    pub fn clips(&self, body: &BodyProxy) -> Result<Vec<Clip>> {
        match &self.corpus {
            Some(dir) => load_dir(dir),
            None => {
                let kinds: Vec<&str> = self.kinds.iter().map(String::as_str).collect();
                Ok(generate_corpus(&kinds, self.count, self.frames, self.split, self.seed, body)?
                    .into_iter()
                    .map(|c| c.clip)
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FramesConfig {
    pub orientation_mode: OrientationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorSection {
    pub eps_penetration: f64,
    pub eps_contact: f64,
    pub late_fraction: f64,
    pub stride: usize,
    pub mode: CorrectionMode,
    pub scheduler: String,
}

impl Default for CorrectorSection {
    fn default() -> Self {
        let c = CorrectorConfig::default();
        Self {
            eps_penetration: c.eps_penetration,
            eps_contact: c.eps_contact,
            late_fraction: c.late_fraction,
            stride: c.stride,
            mode: c.mode,
            scheduler: "gated".into(),
        }
    }
}

impl CorrectorSection {
    pub fn config(&self) -> CorrectorConfig {
        CorrectorConfig {
            eps_penetration: self.eps_penetration,
            eps_contact: self.eps_contact,
            late_fraction: self.late_fraction,
            stride: self.stride,
            mode: self.mode,
        }
    }

    pub fn scheduler(&self) -> Result<&'static dyn Scheduler> {
        schedulers().get(&self.scheduler)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSection {
    pub dct_bases: usize,
    pub blocks: usize,
    pub width: usize,
    pub reference: ReferencePolicy,
    pub penetration_points: usize,
    pub seed: u64,
    pub lambda_o: f64,
    pub lambda_vo: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    /// Falls back to `[train]` when unset.
    pub train: Option<TrainConfig>,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let c = PredictorConfig::default();
        let w = PredictorWeights::default();
        Self {
            dct_bases: c.dct_bases,
            blocks: c.blocks,
            width: c.width,
            reference: c.reference,
            penetration_points: c.penetration_points,
            seed: c.seed,
            lambda_o: w.lambda_o,
            lambda_vo: w.lambda_vo,
            lambda_c: w.lambda_c,
            lambda_p: w.lambda_p,
            train: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub diffusion: DiffusionSettings,
    pub loss: DiffusionWeights,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub canonical: CanonicalConfig,
    pub corrector: CorrectorSection,
    pub frames: FramesConfig,
    pub predictor: PredictorSection,
}

impl Config {
    /// `.json` files are read as JSON, anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let config = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        } else {
            Self::from_toml(&text).map_err(|e| match e {
                Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
                other => other,
            })?
        };
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::parse("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidValue(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(t) = &self.predictor.train {
            t.validate()?;
        }
        self.corrector.config().validate()?;
        self.corrector.scheduler()?;
        if self.diffusion.steps < 2 {
            return Err(Error::Config(format!("diffusion.T must be >= 2, got {}", self.diffusion.steps)));
        }
        Split::new(self.data.split.past, self.data.split.future)?;
        Ok(())
    }

    pub fn predictor_config(&self) -> PredictorConfig {
        let p = &self.predictor;
        PredictorConfig {
            dct_bases: p.dct_bases,
            blocks: p.blocks,
            width: p.width,
            orientation: self.frames.orientation_mode,
            contact: self.corrector.mode.contact_mode(),
            reference: p.reference,
            eps_contact: self.corrector.eps_contact,
            penetration_points: p.penetration_points,
            seed: p.seed,
        }
    }

    /// Surface terms are dropped in skeletal mode.
    pub fn predictor_weights(&self) -> PredictorWeights {
        let p = &self.predictor;
        let w = PredictorWeights {
            lambda_o: p.lambda_o,
            lambda_vo: p.lambda_vo,
            lambda_c: p.lambda_c,
            lambda_p: p.lambda_p,
        };
        match self.corrector.mode {
            CorrectionMode::Mesh => w,
            CorrectionMode::Skeletal => PredictorWeights {
                lambda_c: 0.0,
                lambda_p: 0.0,
                ..w
            },
        }
    }

    pub fn predictor_train(&self) -> TrainConfig {
        self.predictor.train.clone().unwrap_or_else(|| self.train.clone())
    }
}
