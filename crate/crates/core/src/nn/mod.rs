//! Small neural-network building blocks on top of candle tensors, with
//! seeded parameter initialization.

pub mod checkpoint;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable parameters with a deterministic initializer.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, data, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.insert(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.insert(name, values, shape)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters from a name → tensor map; every stored
    /// parameter must be present with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::shape("checkpoint parameter", format!("{:?}", var.dims()), format!("{:?}", t.dims())));
            }
            var.set(t)?;
        }
        if tensors.len() != self.vars.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                tensors.len(),
                self.vars.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// Uniform fan-in initialization.
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let bound = 1.0 / (input as f64).sqrt();
        Ok(Self {
            weight: ps.uniform(&format!("{name}.weight"), &[input, output], bound)?,
            bias: ps.uniform(&format!("{name}.bias"), &[output], bound)?,
        })
    }

    pub fn zeros(ps: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.constant(&format!("{name}.weight"), &[input, output], 0.0)?,
            bias: ps.constant(&format!("{name}.bias"), &[output], 0.0)?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Inverted dropout with a caller-owned RNG; identity when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
            Ok((x * mask)?)
        }
        _ => Ok(x.clone()),
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("latent dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(ps, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `x` attends to `context`; both `(batch, tokens, dim)`.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let q = self.split(&self.query.forward(x)?)?;
        let k = self.split(&self.key.forward(context)?)?;
        let v = self.split(&self.value.forward(context)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = weights.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.out.forward(&mixed)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.gelu()?)
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, dim * 2)?,
        })
    }

    pub fn forward(&self, x: &Tensor, p: f64, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + dropout(&self.attn.forward(&h, &h)?, p, rng.as_deref_mut())?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + dropout(&self.ff.forward(&h)?, p, rng)?)?)
    }
}

/// Pre-norm block with self-attention, cross-attention to a memory and a
/// feed-forward layer.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    norm1: LayerNorm,
    self_attn: MultiHeadAttention,
    norm2: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm3: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), dim)?,
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), dim)?,
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads)?,
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), dim)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, dim * 2)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        p: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + dropout(&self.self_attn.forward(&h, &h)?, p, rng.as_deref_mut())?)?;
        let h = self.norm2.forward(&x)?;
        let x = (&x + dropout(&self.cross_attn.forward(&h, memory)?, p, rng.as_deref_mut())?)?;
        let h = self.norm3.forward(&x)?;
        Ok((&x + dropout(&self.ff.forward(&h)?, p, rng)?)?)
    }
}

/// Sinusoidal embedding of `positions` into `dim` channels, `(n, dim)`.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
            data.push(if i < half { (p * freq).sin() } else { (p * freq).cos() });
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), &device())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameters_are_seed_deterministic() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        let la = Linear::new(&mut a, "l", 4, 5).unwrap();
        let lb = Linear::new(&mut b, "l", 4, 5).unwrap();
        let x = Tensor::ones((2, 4), DTYPE, &device()).unwrap();
        let ya: Vec<Vec<f64>> = la.forward(&x).unwrap().to_vec2().unwrap();
        let yb: Vec<Vec<f64>> = lb.forward(&x).unwrap().to_vec2().unwrap();
        assert_eq!(ya, yb);
        assert_eq!(a.parameter_count(), 25);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut ps = ParamStore::new(0);
        ps.constant("w", &[1], 0.0).unwrap();
        assert!(ps.constant("w", &[1], 0.0).is_err());
    }

    #[test]
    fn attention_preserves_shape() {
        let mut ps = ParamStore::new(1);
        let attn = MultiHeadAttention::new(&mut ps, "a", 8, 2).unwrap();
        let x = Tensor::ones((3, 5, 8), DTYPE, &device()).unwrap();
        let m = Tensor::ones((3, 7, 8), DTYPE, &device()).unwrap();
        assert_eq!(attn.forward(&x, &m).unwrap().dims(), &[3, 5, 8]);
        assert!(MultiHeadAttention::new(&mut ps, "b", 8, 3).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut ps = ParamStore::new(1);
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &device()).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
