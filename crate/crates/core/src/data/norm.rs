use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::HoiSequence;

/// Per-feature mean and standard deviation. Features with no spread are
/// flagged and only centered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub degenerate: Vec<bool>,
}

const MIN_STD: f64 = 1e-12;

impl NormStats {
    /// Population statistics over every row of every block.
    pub fn fit(blocks: &[ArrayView2<f64>]) -> Result<Self> {
        let width = blocks
            .first()
            .ok_or_else(|| Error::InvalidValue("normalization corpus is empty".into()))?
            .ncols();
        let mut count = 0usize;
        let mut sum = vec![0.0; width];
        for b in blocks {
            if b.ncols() != width {
                return Err(Error::shape("feature width", width, b.ncols()));
            }
            for row in b.rows() {
                count += 1;
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        if count == 0 {
            return Err(Error::InvalidValue("normalization corpus has no frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; width];
        for b in blocks {
            for row in b.rows() {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let raw: Vec<f64> = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        let degenerate: Vec<bool> = raw.iter().map(|s| *s < MIN_STD).collect();
        let std = raw
            .iter()
            .zip(&degenerate)
            .map(|(s, d)| if *d { 1.0 } else { *s })
            .collect();
        Ok(Self { mean, std, degenerate })
    }

    /// Identity statistics for `width` features.
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
            degenerate: vec![false; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.width() {
            return Err(Error::shape("feature width", self.width(), x.ncols()));
        }
        Ok(())
    }

    pub fn normalize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        let mut out = x.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&x)?;
        let mut out = x.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (k, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[k] + self.mean[k];
            }
        }
        Ok(out)
    }
}

/// Statistics over all frames of a set of sequences.
pub fn fit_norm_stats(corpus: &[HoiSequence]) -> Result<NormStats> {
    let flat: Vec<Array2<f64>> = corpus.iter().map(HoiSequence::flatten).collect();
    NormStats::fit(&flat.iter().map(|a| a.view()).collect::<Vec<_>>())
}
