//! The spectral branch: a non-uniform DFT over learnable frequencies, an MLP
//! that refines the resulting coefficients, a projection into the model
//! width, and the inverse transform that turns refined coefficients back into
//! a signal at arbitrary timestamps.
//!
//! For variable `n` with mask `m`, normalized values `v` and frequencies
//! `ω_k` (cycles per normalized time unit):
//!
//! ```text
//! R_n(ω_k) =  (1/Z_n) Σ_l m_l v_l cos(2π ω_k t_l)
//! I_n(ω_k) = −(1/Z_n) Σ_l m_l v_l sin(2π ω_k t_l)
//! Z_n      = max(Σ_l m_l, ε)
//! v̂_n(t)   = Σ_k R̂_n(ω_k) cos(2π ω_k t) − Î_n(ω_k) sin(2π ω_k t)
//! ```
//!
//! The inverse carries no factor of two, so analysing and resynthesizing a
//! real cosine of amplitude `A` returns amplitude `A/2`; the refinement MLP
//! and the seasonal-bias scale absorb that.

use std::collections::HashMap;
use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Norm, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

/// Guards `Z_n` for variables without observations.
pub const Z_EPS: f64 = 1e-8;

pub const OMEGA: &str = "freq.omega";

/// The learnable frequency set, shared by all variables.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyDictionary {
    pub omega: Vec<f64>,
}

impl FrequencyDictionary {
    /// `ω_k = k` for `k = 1..=K`: the integer harmonics of the unit window.
    pub fn harmonics(k: usize) -> Self {
        Self {
            omega: (1..=k).map(|k| k as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.omega.len()], self.omega.clone()).expect("1-D")
    }
}

/// Real and imaginary coefficients, `N × K` each.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub real: Tensor,
    pub imag: Tensor,
    pub refined: bool,
}

impl Spectrum {
    /// Raw spectrum of one aligned sample: `times` has length `L`, `values`
    /// and `mask` are `L × N`.
    pub fn analyze(times: &[f64], values: &Tensor, mask: &Tensor, dict: &FrequencyDictionary) -> Result<Self> {
        let (l, n) = match values.shape() {
            [l, n] if *l == times.len() && mask.shape() == values.shape() => (*l, *n),
            s => return Err(Error::Shape(format!("nudft: values {s:?}, mask {:?}, {} times", mask.shape(), times.len()))),
        };
        let mut g = Graph::new();
        let t = g.constant(Tensor::new([1, l], times.to_vec())?);
        let v = g.constant(values.clone().reshape([1, l, n])?);
        let omega = g.constant(dict.to_tensor());
        let mask = mask.clone().reshape([1, l, n])?;
        let (re, im) = nudft(&mut g, t, v, &mask, omega)?;
        g.evaluate(&HashMap::new())?;
        let k = dict.len();
        Ok(Self {
            real: g.value(re).expect("evaluated").clone().reshape([n, k])?,
            imag: g.value(im).expect("evaluated").clone().reshape([n, k])?,
            refined: false,
        })
    }

    /// Evaluates the inverse transform at `times`, giving `|times| × N`.
    pub fn synthesize(&self, times: &[f64], dict: &FrequencyDictionary) -> Result<Tensor> {
        let (n, k) = match self.real.shape() {
            [n, k] if *k == dict.len() && self.imag.shape() == self.real.shape() => (*n, *k),
            s => return Err(Error::Shape(format!("inverse_nudft: spectrum {s:?} vs {} frequencies", dict.len()))),
        };
        let q = times.len();
        let mut g = Graph::new();
        let re = g.constant(self.real.clone().reshape([1, n, k])?);
        let im = g.constant(self.imag.clone().reshape([1, n, k])?);
        let t = g.constant(Tensor::new([1, 1, q], times.to_vec())?);
        let t = g.broadcast_to(t, &[1, n, q])?;
        let omega = g.constant(dict.to_tensor());
        let out = inverse_nudft(&mut g, re, im, t, omega)?;
        let out = g.forward(&HashMap::new(), out)?;
        // [1, N, Q] -> [Q, N]
        Ok(Tensor::from_fn([q, n], |i| out.data()[(i % n) * q + i / n]))
    }

    /// Per-frequency amplitude `sqrt(R² + I²)`, `N × K`.
    pub fn amplitude(&self) -> Tensor {
        Tensor::from_fn(self.real.shape().to_vec(), |i| self.real.data()[i].hypot(self.imag.data()[i]))
    }
}

/// Phase arguments `2π · ω_k · t` for times shaped `[.., T]`, giving `[.., T, K]`.
fn phases(g: &mut Graph, times: NodeId, omega: NodeId) -> Result<NodeId> {
    let mut shape = g.shape(times).to_vec();
    shape.push(1);
    let t = g.reshape(times, &shape)?;
    let wt = g.mul(t, omega)?;
    Ok(g.scale(wt, TAU))
}

/// Batched NUDFT. `times: [B, L]`, `values: [B, L, N]` (normalized),
/// `mask: [B, L, N]`, `omega: [K]`; returns `(R, I)`, each `[B, N, K]`.
pub fn nudft(g: &mut Graph, times: NodeId, values: NodeId, mask: &Tensor, omega: NodeId) -> Result<(NodeId, NodeId)> {
    let (b, l, n) = match g.shape(values) {
        [b, l, n] => (*b, *l, *n),
        s => return Err(Error::Shape(format!("nudft: values {s:?}"))),
    };
    if g.shape(times) != [b, l] || mask.shape() != [b, l, n] {
        return Err(Error::Shape(format!(
            "nudft: times {:?}, values {:?}, mask {:?}",
            g.shape(times),
            [b, l, n],
            mask.shape()
        )));
    }
    let arg = phases(g, times, omega)?;
    let cos = g.cos(arg);
    let sin = g.sin(arg);

    let m = g.constant(mask.clone());
    let mv = g.mul(values, m)?;
    let mv_t = g.permute(mv, &[0, 2, 1])?;
    let inv_z = Tensor::from_fn([b, n, 1], |i| {
        let (bi, ni) = (i / n, i % n);
        let count: f64 = (0..l).map(|li| mask.data()[(bi * l + li) * n + ni]).sum();
        1.0 / count.max(Z_EPS)
    });
    let inv_z = g.constant(inv_z);
    let re = g.matmul(mv_t, cos)?;
    let re = g.mul(re, inv_z)?;
    let im = g.matmul(mv_t, sin)?;
    let im = g.mul(im, inv_z)?;
    let im = g.neg(im);
    Ok((re, im))
}

/// Batched inverse NUDFT. `real`, `imag`: `[B, N, K]`; `times: [B, N, T]`;
/// returns `[B, N, T]`.
pub fn inverse_nudft(g: &mut Graph, real: NodeId, imag: NodeId, times: NodeId, omega: NodeId) -> Result<NodeId> {
    let (b, n, k) = match g.shape(real) {
        [b, n, k] => (*b, *n, *k),
        s => return Err(Error::Shape(format!("inverse_nudft: spectrum {s:?}"))),
    };
    match g.shape(times) {
        [tb, tn, _] if *tb == b && *tn == n => {}
        s => return Err(Error::Shape(format!("inverse_nudft: spectrum {:?} vs times {s:?}", [b, n, k]))),
    }
    let arg = phases(g, times, omega)?;
    let cos = g.cos(arg);
    let sin = g.sin(arg);
    let re = g.reshape(real, &[b, n, 1, k])?;
    let im = g.reshape(imag, &[b, n, 1, k])?;
    let a = g.mul(cos, re)?;
    let s = g.mul(sin, im)?;
    let terms = g.sub(a, s)?;
    g.sum_axis(terms, 3, false)
}

/// Per-variable MLP over the concatenated `[R ‖ I]` coefficients, keeping the
/// `2K` width (hidden width `4K`).
#[derive(Clone, Debug)]
pub struct SpectrumRefiner {
    pub mlp: Mlp,
}

impl SpectrumRefiner {
    pub const PREFIX: &'static str = "freq.refine";

    pub fn named() -> Self {
        Self {
            mlp: Mlp::named(Self::PREFIX),
        }
    }

    pub fn init(store: &mut ParamStore, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::init(store, Self::PREFIX, 2 * k, 4 * k, 2 * k, rng),
        }
    }

    /// `raw: [B, N, 2K]` to `[B, N, 2K]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, raw: NodeId) -> Result<NodeId> {
        self.mlp.apply(g, store, raw)
    }
}

/// Linear projection `2K → D` followed by layer normalization.
#[derive(Clone, Debug)]
pub struct SpectrumEncoder {
    pub proj: Linear,
    pub norm: Norm,
}

impl SpectrumEncoder {
    pub fn named() -> Self {
        Self {
            proj: Linear::named("freq.encode"),
            norm: Norm::named("freq.encode_norm"),
        }
    }

    pub fn init(store: &mut ParamStore, k: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::init(store, "freq.encode", 2 * k, d_model, rng),
            norm: Norm::init(store, "freq.encode_norm", d_model),
        }
    }

    /// `refined: [B, N, 2K]` to `h_freq: [B, N, D]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, refined: NodeId) -> Result<NodeId> {
        let h = self.proj.apply(g, store, refined)?;
        self.norm.apply(g, store, h)
    }
}
