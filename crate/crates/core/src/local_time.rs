//! The temporal branch.
//!
//! Each variable's history is cut into fixed-width time windows
//! ("transformable" patches, holding however many observations fall inside).
//! Observations are embedded with a continuous time embedding, pooled per
//! patch by a time-aware softmax convolution, condensed onto `W` learnable
//! query tokens by cross-attention, mixed across tokens and variables, and
//! finally aggregated into one `D`-vector per variable.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, Linear, Mlp, Norm, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

/// Patch boundaries over one variable's sorted observation times.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    /// Patch width `s` in time units.
    pub window: f64,
    /// Index range of the observations in each patch; empty ranges are
    /// empty patches.
    pub bounds: Vec<Range<usize>>,
}

impl PatchLayout {
    pub fn n_patches(&self) -> usize {
        self.bounds.len()
    }

    /// `m_p`: 1 for patches holding at least one observation.
    pub fn presence(&self) -> Vec<f64> {
        self.bounds.iter().map(|r| if r.is_empty() { 0.0 } else { 1.0 }).collect()
    }
}

/// Number of windows of width `window` needed to cover `span`.
pub fn patch_count(span: f64, window: f64) -> usize {
    // Shave a rounding ulp so that e.g. span 1, window 0.1 gives 10.
    let ratio = span / window;
    ((ratio * (1.0 - 4.0 * f64::EPSILON)).ceil() as usize).max(1)
}

/// Patch holding time `t`: `p` with `p·s ≤ t < (p+1)·s` (zero-based). Times
/// outside `[0, span)` fold into the first or last patch.
pub fn patch_index(t: f64, window: f64, n_patches: usize) -> usize {
    let p = (t / window).floor();
    if p < 0.0 {
        0
    } else {
        (p as usize).min(n_patches - 1)
    }
}

/// Splits sorted `times` on `[0, span)` into windows of width `window`.
pub fn patch_partition(times: &[f64], window: f64, span: f64) -> Result<PatchLayout> {
    if !(window > 0.0 && window.is_finite()) {
        return Err(Error::Config(format!("patch window must be positive, got {window}")));
    }
    let n = patch_count(span, window);
    let mut bounds = vec![0..0; n];
    let mut start = 0;
    for (p, b) in bounds.iter_mut().enumerate() {
        let mut end = start;
        while end < times.len() && patch_index(times[end], window, n) == p {
            end += 1;
        }
        *b = start..end;
        start = end;
    }
    debug_assert_eq!(start, times.len(), "times must be sorted");
    Ok(PatchLayout { window, bounds })
}

/// Fixed sinusoidal positional encodings, `P × D`.
pub fn positional_encoding(n_patches: usize, d_model: usize) -> Tensor {
    Tensor::from_fn([n_patches, d_model], |i| {
        let (p, j) = ((i / d_model) as f64, i % d_model);
        let rate = 10_000f64.powf((2 * (j / 2)) as f64 / d_model as f64);
        if j % 2 == 0 {
            (p / rate).sin()
        } else {
            (p / rate).cos()
        }
    })
}

/// Continuous time embedding `φ(t)`: a linear trend term followed by
/// `D_t − 1` learnable sinusoids.
#[derive(Clone, Debug)]
pub struct TimeEmbedding {
    pub omega: String,
    pub alpha: String,
    pub dim: usize,
}

impl TimeEmbedding {
    pub fn named(dim: usize) -> Self {
        Self {
            omega: "time.embed.omega".into(),
            alpha: "time.embed.alpha".into(),
            dim,
        }
    }

    /// Slope 1 for the linear term; periodic rates evenly spaced up to
    /// `π·D_t`; zero shifts.
    pub fn init(store: &mut ParamStore, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("time embedding needs at least 2 dimensions, got {dim}")));
        }
        let this = Self::named(dim);
        let top = std::f64::consts::PI * dim as f64;
        let omega = Tensor::from_fn([dim], |d| if d == 0 { 1.0 } else { top * d as f64 / (dim - 1) as f64 });
        store.insert(&this.omega, omega);
        store.insert(&this.alpha, Tensor::zeros([dim]));
        Ok(this)
    }

    /// `t: [.., 1]` to `[.., D_t]`.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, t: NodeId) -> Result<NodeId> {
        let omega = store.leaf(g, &self.omega)?;
        let alpha = store.leaf(g, &self.alpha)?;
        let wt = g.mul(t, omega)?;
        let lin = g.add(wt, alpha)?;
        let axis = g.shape(lin).len() - 1;
        let trend = g.slice(lin, axis, 0, 1)?;
        let periodic = g.slice(lin, axis, 1, self.dim)?;
        let periodic = g.sin(periodic);
        g.concat(&[trend, periodic], axis)
    }

    /// `φ(t)` for a single timestamp.
    pub fn embed(&self, store: &ParamStore, t: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ti = g.constant(Tensor::new([1], vec![t])?);
        let out = self.apply(&mut g, store, ti)?;
        Ok(g.forward(store, out)?.into_data())
    }
}

/// Time-aware patch convolution: per-observation filter logits from a
/// one-hidden-layer perceptron, normalized by a per-channel softmax across
/// the patch, weighting a linear content map. The output does not depend on
/// how many observations a patch holds, only on their embeddings.
#[derive(Clone, Debug)]
pub struct Ttcn {
    pub filter: Mlp,
    pub content: Linear,
}

impl Ttcn {
    pub fn named() -> Self {
        Self {
            filter: Mlp::named("time.ttcn.filter"),
            content: Linear::named("time.ttcn.content"),
        }
    }

    /// `d_in = D_t + 1`, output width `d_out = D − 1`.
    pub fn init(store: &mut ParamStore, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            filter: Mlp::init(store, "time.ttcn.filter", d_in, hidden, d_out, rng),
            content: Linear::init(store, "time.ttcn.content", d_in, d_out, rng),
        }
    }

    /// `z: [n_obs, D_t + 1]`, grouped into patches by row index; returns
    /// `[groups.len(), D − 1]` with zero rows for empty patches.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, z: NodeId, groups: Vec<Vec<usize>>) -> Result<NodeId> {
        let logits = self.filter.apply(g, store, z)?;
        let content = self.content.apply(g, store, z)?;
        g.segment_pool(logits, content, groups)
    }
}

/// Observations of a batch flattened for patch encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchInputs {
    /// `[n_obs, 1]`, normalized time.
    pub times: Tensor,
    /// `[n_obs, 1]`, normalized value.
    pub values: Tensor,
    /// Observation rows per `(b, n, p)`, flattened in that order.
    pub groups: Vec<Vec<usize>>,
    /// `[B, N, P, 1]`, patch presence `m_p`.
    pub presence: Tensor,
}

/// Embeds every observation, encodes each patch and appends its presence
/// bit: `[B, N, P, D]`.
pub fn encode_patches(
    g: &mut Graph,
    store: &ParamStore,
    embed: &TimeEmbedding,
    ttcn: &Ttcn,
    inputs: &PatchInputs,
) -> Result<NodeId> {
    let shape = inputs.presence.shape().to_vec();
    let t = g.constant(inputs.times.clone());
    let v = g.constant(inputs.values.clone());
    let phi = embed.apply(g, store, t)?;
    let z = g.concat(&[phi, v], 1)?;
    let pooled = ttcn.apply(g, store, z, inputs.groups.clone())?;
    let width = g.shape(pooled)[1];
    let pooled = g.reshape(pooled, &[shape[0], shape[1], shape[2], width])?;
    let presence = g.constant(inputs.presence.clone());
    g.concat(&[pooled, presence], 3)
}

/// Cross-attention from `W` learnable query tokens onto the patch sequence.
#[derive(Clone, Debug)]
pub struct QueryMixer {
    pub queries: String,
}

impl QueryMixer {
    pub fn named() -> Self {
        Self {
            queries: "time.queries".into(),
        }
    }

    pub fn init(store: &mut ParamStore, n_queries: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        let this = Self::named();
        store.insert(&this.queries, uniform(rng, &[n_queries, d_model], d_model));
        this
    }

    /// `patches: [.., P, D]`, `pe: [P, D]`. Returns the condensed tokens
    /// `[.., W, D]` and the attention weights `[.., W, P]`, each row a
    /// distribution over patches. Positional encodings enter the keys only.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, patches: NodeId, pe: &Tensor) -> Result<(NodeId, NodeId)> {
        let q = store.leaf(g, &self.queries)?;
        let d = *g.shape(patches).last().expect("rank ≥ 2") as f64;
        let pe = g.constant(pe.clone());
        let keys = g.add(patches, pe)?;
        let qt = g.transpose(q)?;
        let scores = g.matmul(keys, qt)?;
        let scores = g.transpose(scores)?;
        let scores = g.scale(scores, 1.0 / d.sqrt());
        let attn = g.softmax(scores);
        let tokens = g.matmul(attn, patches)?;
        Ok((tokens, attn))
    }
}

/// One dual-mixing layer: a residual MLP across the `W` tokens, then one
/// across the `N` variables, each followed by layer normalization over `D`.
#[derive(Clone, Debug)]
pub struct MixBlock {
    pub token_mlp: Mlp,
    pub token_norm: Norm,
    pub variable_mlp: Mlp,
    pub variable_norm: Norm,
}

/// Hidden width multiplier of the mixing MLPs.
pub const MIX_EXPANSION: usize = 2;

impl MixBlock {
    pub fn named(layer: usize) -> Self {
        let p = format!("time.mix.{layer}");
        Self {
            token_mlp: Mlp::named(&format!("{p}.token")),
            token_norm: Norm::named(&format!("{p}.token_norm")),
            variable_mlp: Mlp::named(&format!("{p}.variable")),
            variable_norm: Norm::named(&format!("{p}.variable_norm")),
        }
    }

    pub fn init(store: &mut ParamStore, layer: usize, n_tokens: usize, n_vars: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        let p = format!("time.mix.{layer}");
        let (w, n) = (n_tokens, n_vars);
        Self {
            token_mlp: Mlp::init(store, &format!("{p}.token"), w, MIX_EXPANSION * w, w, rng),
            token_norm: Norm::init(store, &format!("{p}.token_norm"), d_model),
            variable_mlp: Mlp::init(store, &format!("{p}.variable"), n, MIX_EXPANSION * n, n, rng),
            variable_norm: Norm::init(store, &format!("{p}.variable_norm"), d_model),
        }
    }

    /// `h: [B, N, W, D]` to the same shape.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        // Token mixing over W, shared across (B, N, D).
        let x = g.permute(h, &[0, 1, 3, 2])?;
        let y = self.token_mlp.apply(g, store, x)?;
        let y = g.permute(y, &[0, 1, 3, 2])?;
        let h = g.add(h, y)?;
        let h = self.token_norm.apply(g, store, h)?;
        // Variable mixing over N, shared across (B, W, D).
        let x = g.permute(h, &[0, 2, 3, 1])?;
        let y = self.variable_mlp.apply(g, store, x)?;
        let y = g.permute(y, &[0, 3, 1, 2])?;
        let h = g.add(h, y)?;
        self.variable_norm.apply(g, store, h)
    }
}

pub fn dual_mixing(g: &mut Graph, store: &ParamStore, blocks: &[MixBlock], h: NodeId) -> Result<NodeId> {
    blocks.iter().try_fold(h, |h, b| b.apply(g, store, h))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    /// Flatten `W × D` and project to `D`.
    #[default]
    Linear,
    /// Depthwise width-`W` convolution over the token axis.
    Conv,
}

impl std::str::FromStr for AggregationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "conv" => Ok(Self::Conv),
            other => Err(Error::Config(format!("unknown aggregation kind `{other}` (expected linear or conv)"))),
        }
    }
}

/// Collapses `[B, N, W, D]` tokens into `h_time: [B, N, D]`.
#[derive(Clone, Debug)]
pub enum Aggregator {
    Linear(Linear),
    Conv { kernel: String, bias: String },
}

impl Aggregator {
    pub fn named(kind: AggregationKind) -> Self {
        match kind {
            AggregationKind::Linear => Self::Linear(Linear::named("time.aggregate")),
            AggregationKind::Conv => Self::Conv {
                kernel: "time.aggregate.kernel".into(),
                bias: "time.aggregate.bias".into(),
            },
        }
    }

    pub fn init(store: &mut ParamStore, kind: AggregationKind, n_tokens: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        match kind {
            AggregationKind::Linear => {
                Self::Linear(Linear::init(store, "time.aggregate", n_tokens * d_model, d_model, rng))
            }
            AggregationKind::Conv => {
                let this = Self::named(kind);
                if let Self::Conv { kernel, bias } = &this {
                    store.insert(kernel, uniform(rng, &[n_tokens, d_model], n_tokens));
                    store.insert(bias, uniform(rng, &[d_model], n_tokens));
                }
                this
            }
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        let s = g.shape(h).to_vec();
        let [b, n, w, d] = s[..] else {
            return Err(Error::Shape(format!("aggregate: expected [B, N, W, D], got {s:?}")));
        };
        match self {
            Self::Linear(proj) => {
                let flat = g.reshape(h, &[b, n, w * d])?;
                proj.apply(g, store, flat)
            }
            Self::Conv { kernel, bias } => {
                let k = store.leaf(g, kernel)?;
                let bias = store.leaf(g, bias)?;
                let weighted = g.mul(h, k)?;
                let summed = g.sum_axis(weighted, 2, false)?;
                g.add(summed, bias)
            }
        }
    }
}

/// Mean of the non-empty patch encodings per variable, `[B, N, D]`; stands
/// in for query mixing and dual mixing when those are ablated.
pub fn mean_pool(g: &mut Graph, patches: NodeId, presence: &Tensor) -> Result<NodeId> {
    let s = presence.shape().to_vec();
    let (b, n, p) = (s[0], s[1], s[2]);
    let inv = Tensor::from_fn([b, n, 1], |i| {
        let count: f64 = presence.data()[i * p..(i + 1) * p].iter().sum();
        1.0 / count.max(1.0)
    });
    let m = g.constant(presence.clone());
    let masked = g.mul(patches, m)?;
    let summed = g.sum_axis(masked, 2, false)?;
    let inv = g.constant(inv);
    g.mul(summed, inv)
}
