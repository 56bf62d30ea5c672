//! Orthonormal DCT-II over time, optionally truncated to the leading bases.

use candle_core::Tensor;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::nn::device;

#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    /// `(bases, frames)`; row `k` is `s_k cos(π (n + ½) k / N)`.
    pub matrix: Array2<f64>,
}

impl DctBasis {
    pub fn new(bases: usize, frames: usize) -> Result<Self> {
        if bases == 0 || bases > frames {
            return Err(Error::Config(format!("need 1 <= DCT bases <= frames, got {bases} for {frames} frames")));
        }
        let n = frames as f64;
        let matrix = Array2::from_shape_fn((bases, frames), |(k, t)| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale * (std::f64::consts::PI * (t as f64 + 0.5) * k as f64 / n).cos()
        });
        Ok(Self { matrix })
    }

    pub fn bases(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn frames(&self) -> usize {
        self.matrix.ncols()
    }

    /// `(frames, D)` → `(bases, D)`.
    pub fn forward(&self, track: ArrayView2<f64>) -> Result<Array2<f64>> {
        if track.nrows() != self.frames() {
            return Err(Error::shape("DCT input frames", self.frames(), track.nrows()));
        }
        Ok(self.matrix.dot(&track))
    }

    /// `(bases, D)` → `(frames, D)`.
    pub fn inverse(&self, coeffs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if coeffs.nrows() != self.bases() {
            return Err(Error::shape("DCT coefficients", self.bases(), coeffs.nrows()));
        }
        Ok(self.matrix.t().dot(&coeffs))
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.matrix.iter().copied().collect(),
            self.matrix.dim(),
            &device(),
        )?)
    }
}
