//! Named parameters and the small layer vocabulary the model is built from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Bindings, Graph, NodeId, Tensor};

/// All learnable tensors of a model, keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers `name` as a gradient-carrying leaf of `g`.
    pub fn leaf(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        g.leaf(name, t.shape(), true)
    }
}

impl Bindings for ParamStore {
    fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }
}

/// Uniform `±1/√fan_in` initialization.
pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..bound))
}

/// Affine map over the last axis: `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
}

impl Linear {
    pub fn named(prefix: &str) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
        }
    }

    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let this = Self::named(prefix);
        store.insert(&this.weight, uniform(rng, &[d_in, d_out], d_in));
        store.insert(&this.bias, uniform(rng, &[d_out], d_in));
        this
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = store.leaf(g, &self.weight)?;
        let b = store.leaf(g, &self.bias)?;
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn named(prefix: &str) -> Self {
        Self {
            first: Linear::named(&format!("{prefix}.0")),
            second: Linear::named(&format!("{prefix}.1")),
        }
    }

    pub fn init(store: &mut ParamStore, prefix: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::init(store, &format!("{prefix}.0"), d_in, hidden, rng),
            second: Linear::init(store, &format!("{prefix}.1"), hidden, d_out, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.first.apply(g, store, x)?;
        let h = g.gelu(h);
        self.second.apply(g, store, h)
    }
}

/// Learnable gain and bias for a layer normalization.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: String,
    pub bias: String,
}

impl Norm {
    pub fn named(prefix: &str) -> Self {
        Self {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
        }
    }

    pub fn init(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        let this = Self::named(prefix);
        store.insert(&this.gain, Tensor::ones([width]));
        store.insert(&this.bias, Tensor::zeros([width]));
        this
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = store.leaf(g, &self.gain)?;
        let bias = store.leaf(g, &self.bias)?;
        g.layernorm(x, gain, bias)
    }
}
