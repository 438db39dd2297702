//! Masked reversible instance normalization.
//!
//! Statistics are computed per sample and per variable from observed entries
//! only, so zero-filled gaps never bias the mean or spread.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the per-variable standard deviation.
pub const STD_EPS: f64 = 1e-5;

/// Per-variable mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n_variables: usize) -> Self {
        Self {
            mean: vec![0.0; n_variables],
            std: vec![1.0; n_variables],
        }
    }

    pub fn n_variables(&self) -> usize {
        self.mean.len()
    }
}

fn check_matrix(x: &Tensor, m: &Tensor) -> Result<(usize, usize)> {
    match (x.shape(), m.shape()) {
        ([l, n], s) if s == [*l, *n] => Ok((*l, *n)),
        (a, b) => Err(Error::Shape(format!("masked_normalize: values {a:?} vs mask {b:?}"))),
    }
}

/// Computes observed-only statistics of `x` (`L × N`) under mask `m`.
/// Variables without observations get mean 0 and std 1.
pub fn masked_stats(x: &Tensor, m: &Tensor) -> Result<NormStats> {
    let (l, n) = check_matrix(x, m)?;
    let mut stats = NormStats::identity(n);
    for j in 0..n {
        let observed = (0..l).filter(|&i| m.data()[i * n + j] != 0.0);
        let (count, sum) = observed.clone().fold((0usize, 0.0), |(c, s), i| (c + 1, s + x.data()[i * n + j]));
        if count == 0 {
            continue;
        }
        let mean = sum / count as f64;
        let var = observed
            .map(|i| {
                let d = x.data()[i * n + j] - mean;
                d * d
            })
            .sum::<f64>()
            / count as f64;
        stats.mean[j] = mean;
        stats.std[j] = var.sqrt().max(STD_EPS);
    }
    Ok(stats)
}

/// Normalizes observed entries to `(x − mean) / std`; unobserved entries are
/// exactly zero regardless of what `x` holds there.
pub fn masked_normalize(x: &Tensor, m: &Tensor) -> Result<(Tensor, NormStats)> {
    let stats = masked_stats(x, m)?;
    let n = stats.n_variables();
    let v = Tensor::from_fn(x.shape().to_vec(), |i| {
        let j = i % n;
        if m.data()[i] != 0.0 {
            (x.data()[i] - stats.mean[j]) / stats.std[j]
        } else {
            0.0
        }
    });
    Ok((v, stats))
}

/// Maps normalized predictions `y` (`Q × N`) back to original units.
pub fn masked_denormalize(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let n = stats.n_variables();
    match y.shape() {
        [_, cols] if *cols == n => {}
        s => return Err(Error::Shape(format!("masked_denormalize: {s:?} vs {n} variables"))),
    }
    Ok(Tensor::from_fn(y.shape().to_vec(), |i| {
        let j = i % n;
        y.data()[i] * stats.std[j] + stats.mean[j]
    }))
}
