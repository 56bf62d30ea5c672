//! The conditional denoiser: a transformer encoder over the past frames with
//! an added shape embedding, and a transformer decoder over the noised
//! future with cross-attention to the encoded past.

use std::path::Path;

use candle_core::{Tensor, Var};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::train::TrainableDenoiser;
use crate::diffusion::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{device, sinusoidal, DecoderLayer, EncoderLayer, LayerNorm, Linear, ParamStore};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Longest `H + F` accepted.
    pub max_frames: usize,
    /// Start with an all-zero output head.
    pub zero_head: bool,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            dropout: 0.0,
            max_frames: 128,
            zero_head: false,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// 8 layers of width 256.
    pub fn paper() -> Self {
        Self {
            latent_dim: 256,
            encoder_layers: 8,
            decoder_layers: 8,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Unknown {
                kind: "denoiser preset",
                name: other.to_string(),
                known: "desk, paper".into(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} must be divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::Config("latent_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Per-point MLP followed by a max over points.
#[derive(Debug, Clone)]
pub struct ShapeEncoder {
    first: Linear,
    second: Linear,
}

impl ShapeEncoder {
    pub fn new(ps: &mut ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(ps, "shape.first", 3, dim)?,
            second: Linear::new(ps, "shape.second", dim, dim)?,
        })
    }

    /// `(B, N, 3)` → `(B, dim)`.
    pub fn forward(&self, points: &Tensor) -> Result<Tensor> {
        if points.dims().get(1) == Some(&0) {
            return Err(Error::EmptyPointCloud("shape encoder input"));
        }
        let h = self.second.forward(&self.first.forward(points)?.relu()?)?;
        Ok(h.max(1)?)
    }
}

pub struct DenoiserNet {
    config: DenoiserConfig,
    width: usize,
    store: ParamStore,
    shape: ShapeEncoder,
    past_in: Linear,
    future_in: Linear,
    time_first: Linear,
    time_second: Linear,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    head: Linear,
}

impl DenoiserNet {
    /// A freshly initialized network for frames of `width` features.
    pub fn new(config: DenoiserConfig, width: usize) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        let mut ps = ParamStore::new(config.seed);
        let shape = ShapeEncoder::new(&mut ps, d)?;
        let past_in = Linear::new(&mut ps, "past_in", width, d)?;
        let future_in = Linear::new(&mut ps, "future_in", width, d)?;
        let time_first = Linear::new(&mut ps, "time.first", d, d)?;
        let time_second = Linear::new(&mut ps, "time.second", d, d)?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut ps, &format!("encoder.{i}"), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNorm::new(&mut ps, "encoder.norm", d)?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut ps, &format!("decoder.{i}"), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut ps, "decoder.norm", d)?;
        let head = if config.zero_head {
            Linear::zeros(&mut ps, "head", d, width)?
        } else {
            Linear::new(&mut ps, "head", d, width)?
        };
        Ok(Self {
            config,
            width,
            store: ps,
            shape,
            past_in,
            future_in,
            time_first,
            time_second,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            head,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    fn check_width(&self, x: &Tensor, what: &'static str) -> Result<()> {
        let w = *x.dims().last().unwrap_or(&0);
        if x.rank() != 3 || w != self.width {
            return Err(Error::shape(what, format!("(batch, frames, {})", self.width), format!("{:?}", x.dims())));
        }
        Ok(())
    }

    fn positions(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.config.max_frames {
            return Err(Error::Config(format!(
                "{} frames exceed max_frames {}",
                start + count,
                self.config.max_frames
            )));
        }
        let pos: Vec<f64> = (start..start + count).map(|p| p as f64).collect();
        sinusoidal(&pos, self.config.latent_dim)
    }

    /// Encoded past with the shape embedding: `(B, H, latent)`.
    pub fn encode_condition(&self, past: &Tensor, shapes: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        self.check_width(past, "past")?;
        let (_, h, _) = past.dims3()?;
        if h == 0 {
            return Err(Error::InvalidValue("condition needs at least one past frame".into()));
        }
        let shape = self.shape.forward(shapes)?.unsqueeze(1)?;
        let mut x = self
            .past_in
            .forward(past)?
            .broadcast_add(&self.positions(0, h)?)?
            .broadcast_add(&shape)?;
        for layer in &self.encoder {
            x = layer.forward(&x, self.config.dropout, rng.as_deref_mut())?;
        }
        self.encoder_norm.forward(&x)
    }

    /// Decodes `x_t` against an encoded condition.
    pub fn decode(&self, x_t: &Tensor, t: &[usize], memory: &Tensor, past_frames: usize, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        self.check_width(x_t, "x_t")?;
        let (b, f, _) = x_t.dims3()?;
        if t.len() != b {
            return Err(Error::shape("diffusion steps per batch", b, t.len()));
        }
        let steps: Vec<f64> = t.iter().map(|&t| t as f64).collect();
        let time = self
            .time_second
            .forward(&self.time_first.forward(&sinusoidal(&steps, self.config.latent_dim)?)?.gelu()?)?
            .unsqueeze(1)?;
        let mut x = self
            .future_in
            .forward(x_t)?
            .broadcast_add(&self.positions(past_frames, f)?)?
            .broadcast_add(&time)?;
        for layer in &self.decoder {
            x = layer.forward(&x, memory, self.config.dropout, rng.as_deref_mut())?;
        }
        self.head.forward(&self.decoder_norm.forward(&x)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "config": self.config,
            "width": self.width,
            "extra": extra,
        });
        Checkpoint::from_store(CHECKPOINT_KIND, header, &self.store).save(path)
    }

    /// Rebuilds a network from a checkpoint; returns it with the caller's
    /// extra header.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: DenoiserConfig = serde_json::from_value(ck.header["config"].clone())
            .map_err(|e| Error::parse("checkpoint header config", e.to_string()))?;
        let width = ck.header["width"]
            .as_u64()
            .ok_or_else(|| Error::parse("checkpoint header", "missing width"))? as usize;
        let net = Self::new(config, width)?;
        net.store.load(&ck.tensors)?;
        Ok((net, ck.header["extra"].clone()))
    }
}

impl TrainableDenoiser for DenoiserNet {
    fn forward(&self, x_t: &Tensor, t: &[usize], past: &Tensor, shapes: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let memory = self.encode_condition(past, shapes, rng.as_deref_mut())?;
        self.decode(x_t, t, &memory, past.dims()[1], rng)
    }

    fn vars(&self) -> Vec<Var> {
        self.store.vars()
    }
}

/// Stacks conditions into `(B, H, W)` past and `(B, N, 3)` shape tensors.
pub fn condition_tensors(conds: &[Condition]) -> Result<(Tensor, Tensor)> {
    let first = conds
        .first()
        .ok_or_else(|| Error::InvalidValue("no conditions".into()))?;
    let (h, w) = first.past.dim();
    let n = first.shape_points.nrows();
    let mut past: Vec<f64> = Vec::with_capacity(conds.len() * h * w);
    let mut shapes: Vec<f64> = Vec::with_capacity(conds.len() * n * 3);
    for c in conds {
        if c.past.dim() != (h, w) {
            return Err(Error::shape("condition past", format!("({h}, {w})"), format!("{:?}", c.past.dim())));
        }
        if c.shape_points.dim() != (n, 3) {
            return Err(Error::shape("condition shape points", format!("({n}, 3)"), format!("{:?}", c.shape_points.dim())));
        }
        past.extend(c.past.iter().copied());
        shapes.extend(c.shape_points.iter().copied());
    }
    if n == 0 {
        return Err(Error::EmptyPointCloud("condition shape"));
    }
    Ok((
        Tensor::from_vec(past, (conds.len(), h, w), &device())?,
        Tensor::from_vec(shapes, (conds.len(), n, 3), &device())?,
    ))
}

pub fn to_tensor3(x: &Array3<f64>) -> Result<Tensor> {
    Ok(Tensor::from_vec(x.iter().copied().collect(), x.dim(), &device())?)
}

pub fn from_tensor3(t: &Tensor) -> Result<Array3<f64>> {
    let (a, b, c) = t.dims3()?;
    Array3::from_shape_vec((a, b, c), t.flatten_all()?.to_vec1::<f64>()?)
        .map_err(|e| Error::InvalidValue(e.to_string()))
}

impl Denoiser for DenoiserNet {
    fn denoise(&self, x_t: &Array3<f64>, t: usize, conds: &[Condition]) -> Result<Array3<f64>> {
        let uniform = conds.iter().all(|c| c.shape_points.nrows() == conds[0].shape_points.nrows());
        if uniform {
            let (past, shapes) = condition_tensors(conds)?;
            let steps = vec![t; conds.len()];
            return from_tensor3(&TrainableDenoiser::forward(self, &to_tensor3(x_t)?, &steps, &past, &shapes, None)?);
        }
        let mut out = Array3::zeros(x_t.dim());
        for (b, c) in conds.iter().enumerate() {
            let one = x_t.slice(ndarray::s![b..b + 1, .., ..]).to_owned();
            let y = self.denoise(&one, t, std::slice::from_ref(c))?;
            out.slice_mut(ndarray::s![b..b + 1, .., ..]).assign(&y);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn cond(seed: u64, h: usize, w: usize, n: usize) -> Condition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Condition {
            past: Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0)),
            shape_points: Array2::from_shape_fn((n, 3), |_| rng.random_range(-0.2..0.2)),
        }
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            latent_dim: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn zero_head_outputs_zero_and_inference_is_deterministic() {
        let net = DenoiserNet::new(DenoiserConfig { zero_head: true, ..small() }, 15).unwrap();
        let x = Array3::from_elem((1, 4, 15), 0.3);
        let y = net.denoise(&x, 7, &[cond(0, 3, 15, 20)]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        let net = DenoiserNet::new(small(), 15).unwrap();
        let a = net.denoise(&x, 7, &[cond(0, 3, 15, 20)]).unwrap();
        let b = net.denoise(&x, 7, &[cond(0, 3, 15, 20)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), x.dim());
    }

    #[test]
    fn memory_is_permutation_invariant_and_shape_sensitive() {
        let net = DenoiserNet::new(small(), 15).unwrap();
        let c = cond(1, 10, 15, 30);
        let mut permuted = c.clone();
        for i in 0..30 {
            permuted.shape_points.row_mut(i).assign(&c.shape_points.row(29 - i));
        }
        let (p, s) = condition_tensors(&[c.clone()]).unwrap();
        let (_, s2) = condition_tensors(&[permuted]).unwrap();
        let m1 = net.encode_condition(&p, &s, None).unwrap();
        let m2 = net.encode_condition(&p, &s2, None).unwrap();
        assert_eq!(m1.dims(), &[1, 10, 16]);
        let d: f64 = (&m1 - &m2).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
        let other = cond(2, 10, 15, 30);
        let (_, s3) = condition_tensors(&[other]).unwrap();
        let m3 = net.encode_condition(&p, &s3, None).unwrap();
        let d: f64 = (&m1 - &m3).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d > 1e-6);
    }

    #[test]
    fn empty_shape_and_long_horizon_are_rejected() {
        let net = DenoiserNet::new(DenoiserConfig { max_frames: 8, ..small() }, 15).unwrap();
        let x = Array3::zeros((1, 4, 15));
        assert!(net.denoise(&x, 1, &[cond(0, 3, 15, 0)]).is_err());
        assert!(matches!(net.denoise(&x, 1, &[cond(0, 5, 15, 4)]), Err(Error::Config(_))));
        assert!(DenoiserNet::new(DenoiserConfig { heads: 3, ..small() }, 15).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_stable_parameter_count() {
        let net = DenoiserNet::new(small(), 15).unwrap();
        assert_eq!(net.parameter_count(), DenoiserNet::new(small(), 15).unwrap().parameter_count());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        net.save(&path, serde_json::json!({"note": 1})).unwrap();
        let (back, extra) = DenoiserNet::load(&path).unwrap();
        assert_eq!(extra["note"], 1);
        let x = Array3::from_elem((1, 2, 15), 0.1);
        let c = [cond(3, 2, 15, 5)];
        assert_eq!(net.denoise(&x, 3, &c).unwrap(), back.denoise(&x, 3, &c).unwrap());
    }
}
