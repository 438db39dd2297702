//! The assembled forecaster: configuration, ablation switches, batch inputs
//! and the forward graph.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AlignedBatch;
use crate::error::{Error, Result};
use crate::frequency::{inverse_nudft, nudft, FrequencyDictionary, SpectrumEncoder, SpectrumRefiner, OMEGA};
use crate::local_time::{
    dual_mixing, encode_patches, mean_pool, patch_count, patch_index, positional_encoding, AggregationKind,
    Aggregator, MixBlock, PatchInputs, QueryMixer, TimeEmbedding, Ttcn,
};
use crate::nn::ParamStore;
use crate::output::{compose_prediction, fuse, init_scalars, Decoder, LAMBDA_FUSION, LAMBDA_SEASONAL};
use crate::revin::{masked_normalize, NormStats};
use crate::tensor::{Graph, NodeId, Tensor};

fn default_d_model() -> usize {
    64
}
fn default_n_freqs() -> usize {
    16
}
fn default_n_queries() -> usize {
    8
}
fn default_n_patches() -> usize {
    8
}
fn default_time_dim() -> usize {
    10
}
fn default_mix_layers() -> usize {
    2
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Variable count `N`; 0 in a config file means "take it from the data".
    #[serde(default)]
    pub n_variables: usize,
    /// Hidden width `D`.
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Frequency dictionary size `K`.
    #[serde(default = "default_n_freqs")]
    pub n_freqs: usize,
    /// Learnable query tokens `W`.
    #[serde(default = "default_n_queries")]
    pub n_queries: usize,
    /// Patches across the normalized lookback window.
    #[serde(default = "default_n_patches")]
    pub n_patches: usize,
    /// Patch width `s` in normalized time; overrides `n_patches` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_window: Option<f64>,
    /// Time embedding width `D_t`.
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    /// Dual-mixing layers.
    #[serde(default = "default_mix_layers")]
    pub mix_layers: usize,
    #[serde(default)]
    pub aggregation: AggregationKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

impl ModelConfig {
    pub fn new(n_variables: usize) -> Self {
        Self {
            n_variables,
            d_model: default_d_model(),
            n_freqs: default_n_freqs(),
            n_queries: default_n_queries(),
            n_patches: default_n_patches(),
            patch_window: None,
            time_dim: default_time_dim(),
            mix_layers: default_mix_layers(),
            aggregation: AggregationKind::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_variables", self.n_variables),
            ("n_freqs", self.n_freqs),
            ("n_queries", self.n_queries),
            ("n_patches", self.n_patches),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{key} must be at least 1")));
            }
        }
        if self.d_model < 2 {
            return Err(Error::Config(format!("model.d_model must be at least 2, got {}", self.d_model)));
        }
        if self.time_dim < 2 {
            return Err(Error::Config(format!("model.time_dim must be at least 2, got {}", self.time_dim)));
        }
        if let Some(s) = self.patch_window {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::Config(format!("model.patch_window must lie in (0, 1], got {s}")));
            }
        }
        Ok(())
    }

    /// Patch width in normalized time.
    pub fn patch_width(&self) -> f64 {
        self.patch_window.unwrap_or(1.0 / self.n_patches as f64)
    }

    /// Effective patch count `P`.
    pub fn patches(&self) -> usize {
        match self.patch_window {
            Some(s) => patch_count(1.0, s),
            None => self.n_patches,
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One removable component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoFreq,
    NoTime,
    NoRecon,
    NoRefine,
    NoQueryMix,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoFreq,
        Ablation::NoTime,
        Ablation::NoRecon,
        Ablation::NoRefine,
        Ablation::NoQueryMix,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            Ablation::NoFreq => "no_freq",
            Ablation::NoTime => "no_time",
            Ablation::NoRecon => "no_recon",
            Ablation::NoRefine => "no_refine",
            Ablation::NoQueryMix => "no_query_mix",
        }
    }

    /// Name of the variant in the usual ablation table.
    pub fn variation(self) -> &'static str {
        match self {
            Ablation::NoFreq => "w/o Global Frequency Module",
            Ablation::NoTime => "w/o Local Time Module",
            Ablation::NoRecon => "w/o Reconstruction Loss",
            Ablation::NoRefine => "w/o Spectrum Refinement",
            Ablation::NoQueryMix => "w/o Query-based Patch Mixing",
        }
    }

    /// Parameter name prefixes the ablated forward never touches.
    pub fn removed_prefixes(self) -> &'static [&'static str] {
        match self {
            Ablation::NoFreq => &[OMEGA, "freq.", LAMBDA_FUSION, LAMBDA_SEASONAL],
            Ablation::NoTime => &["time.ttcn.", "time.queries", "time.mix.", "time.aggregate"],
            Ablation::NoRecon => &[],
            Ablation::NoRefine => &[SpectrumRefiner::PREFIX],
            Ablation::NoQueryMix => &["time.queries", "time.mix.", "time.aggregate"],
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.flag() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Ablation::ALL.iter().map(|a| a.flag()).collect();
                Error::Config(format!("unknown ablation `{s}` (expected one of {})", known.join(", ")))
            })
    }
}

/// A set of active ablations.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ablations(BTreeSet<Ablation>);

impl Ablations {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn only(a: Ablation) -> Self {
        Self(BTreeSet::from([a]))
    }

    pub fn insert(&mut self, a: Ablation) {
        self.0.insert(a);
    }

    pub fn contains(&self, a: Ablation) -> bool {
        self.0.contains(&a)
    }

    pub fn iter(&self) -> impl Iterator<Item = Ablation> + '_ {
        self.0.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.contains(Ablation::NoFreq) && self.contains(Ablation::NoTime) {
            return Err(Error::Config("no_freq and no_time cannot both be set: nothing would encode the history".into()));
        }
        Ok(())
    }

    /// Whether parameter `name` takes part in the forward pass.
    pub fn uses(&self, name: &str) -> bool {
        !self.iter().any(|a| a.removed_prefixes().iter().any(|p| name.starts_with(p)))
    }
}

impl FromIterator<Ablation> for Ablations {
    fn from_iter<I: IntoIterator<Item = Ablation>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// A batch in model coordinates: normalized time and values, plus everything
/// needed to denormalize predictions and score them.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub ids: Vec<String>,
    /// `[B, L]`, lookback window mapped to `[0, 1]`.
    pub times: Tensor,
    /// `[B, L, N]`, masked-normalized; unobserved entries are 0.
    pub values: Tensor,
    /// `[B, L, N]`
    pub mask: Tensor,
    /// `[B, N, L]`, `values` transposed for reconstruction scoring.
    pub values_by_variable: Tensor,
    /// `[B, N, L]`
    pub mask_by_variable: Tensor,
    pub stats: Vec<NormStats>,
    /// `[B, N, 1]`
    pub mean: Tensor,
    /// `[B, N, 1]`
    pub std: Tensor,
    /// `[B, N, Q]`, normalized time.
    pub queries: Tensor,
    /// `[B, N, Q]`, original time units.
    pub raw_queries: Tensor,
    /// `[B, N, Q]`, original value units.
    pub targets: Tensor,
    /// `[B, N, Q]`; 1 for real queries.
    pub query_mask: Tensor,
    pub patches: PatchInputs,
}

impl ModelInput {
    /// Normalizes a padded batch and lays out its patches.
    pub fn from_batch(batch: &AlignedBatch, config: &ModelConfig) -> Result<Self> {
        let (b, l, n, q) = (batch.batch_size(), batch.len, batch.n_variables, batch.n_queries);
        if n != config.n_variables {
            return Err(Error::DimensionMismatch {
                expected: config.n_variables,
                found: n,
            });
        }
        let times = Tensor::from_fn([b, l], |i| batch.scales[i / l.max(1)].normalize(batch.times[i]));
        let mut values = Vec::with_capacity(b * l * n);
        let mut stats = Vec::with_capacity(b);
        for bi in 0..b {
            let range = bi * l * n..(bi + 1) * l * n;
            if batch.mask[range.clone()].iter().all(|&m| m == 0.0) {
                return Err(Error::EmptyHistory(batch.ids[bi].clone()));
            }
            let x = Tensor::new([l, n], batch.values[range.clone()].to_vec())?;
            let m = Tensor::new([l, n], batch.mask[range].to_vec())?;
            let (v, s) = masked_normalize(&x, &m)?;
            values.extend_from_slice(v.data());
            stats.push(s);
        }
        let values = Tensor::new([b, l, n], values)?;
        let mask = Tensor::new([b, l, n], batch.mask.clone())?;
        let by_variable = |t: &Tensor| Tensor::from_fn([b, n, l], |i| {
            let (bi, ni, li) = (i / (n * l), (i / l) % n, i % l);
            t.data()[(bi * l + li) * n + ni]
        });
        let mean = Tensor::from_fn([b, n, 1], |i| stats[i / n].mean[i % n]);
        let std = Tensor::from_fn([b, n, 1], |i| stats[i / n].std[i % n]);
        let queries = Tensor::from_fn([b, n, q], |i| batch.scales[i / (n * q).max(1)].normalize(batch.queries[i]));

        let (width, p) = (config.patch_width(), config.patches());
        let mut obs_t = Vec::new();
        let mut obs_v = Vec::new();
        let mut groups = vec![Vec::new(); b * n * p];
        for bi in 0..b {
            for ni in 0..n {
                for li in 0..l {
                    let at = (bi * l + li) * n + ni;
                    if batch.mask[at] == 0.0 {
                        continue;
                    }
                    let t = times.data()[bi * l + li];
                    groups[(bi * n + ni) * p + patch_index(t, width, p)].push(obs_t.len());
                    obs_t.push(t);
                    obs_v.push(values.data()[at]);
                }
            }
        }
        let presence = Tensor::from_fn([b, n, p, 1], |i| if groups[i].is_empty() { 0.0 } else { 1.0 });
        let n_obs = obs_t.len();
        Ok(Self {
            ids: batch.ids.clone(),
            values_by_variable: by_variable(&values),
            mask_by_variable: by_variable(&mask),
            times,
            values,
            mask,
            stats,
            mean,
            std,
            queries,
            raw_queries: Tensor::new([b, n, q], batch.queries.clone())?,
            targets: Tensor::new([b, n, q], batch.targets.clone())?,
            query_mask: Tensor::new([b, n, q], batch.query_mask.clone())?,
            patches: PatchInputs {
                times: Tensor::new([n_obs, 1], obs_t)?,
                values: Tensor::new([n_obs, 1], obs_v)?,
                groups,
                presence,
            },
        })
    }

    pub fn batch_size(&self) -> usize {
        self.times.shape()[0]
    }

    pub fn n_variables(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn n_queries(&self) -> usize {
        self.queries.shape()[2]
    }
}

/// Node handles into one forward graph.
#[derive(Debug)]
pub struct ForwardPass {
    pub graph: Graph,
    /// `[B, N, Q]`, original units.
    pub prediction: NodeId,
    /// `[B, N, Q]`, decoder output in normalized units.
    pub base: NodeId,
    /// `[B, N, Q]`, inverse-NUDFT of the refined spectrum at the queries.
    pub seasonal: Option<NodeId>,
    /// `[B, N, L]`, inverse-NUDFT of the refined spectrum over the history.
    pub reconstruction: Option<NodeId>,
    /// Refined `(R̂, Î)`, each `[B, N, K]`.
    pub spectrum: Option<(NodeId, NodeId)>,
    pub h_time: Option<NodeId>,
    pub h_freq: Option<NodeId>,
    /// `[B, N, W, P]`
    pub attention: Option<NodeId>,
}

/// The forecaster: its configuration, parameters and the layer layout that
/// names them.
#[derive(Clone, Debug)]
pub struct TfMixer {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: TimeEmbedding,
    ttcn: Ttcn,
    query_mixer: QueryMixer,
    mix: Vec<MixBlock>,
    aggregator: Aggregator,
    refiner: SpectrumRefiner,
    encoder: SpectrumEncoder,
    decoder: Decoder,
    pe: Tensor,
}

impl TfMixer {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store.insert(OMEGA, FrequencyDictionary::harmonics(c.n_freqs).to_tensor());
        let refiner = SpectrumRefiner::init(&mut store, c.n_freqs, &mut rng);
        let encoder = SpectrumEncoder::init(&mut store, c.n_freqs, c.d_model, &mut rng);
        let embed = TimeEmbedding::init(&mut store, c.time_dim)?;
        let ttcn = Ttcn::init(&mut store, c.time_dim + 1, c.d_model, c.d_model - 1, &mut rng);
        let query_mixer = QueryMixer::init(&mut store, c.n_queries, c.d_model, &mut rng);
        let mix = (0..c.mix_layers)
            .map(|i| MixBlock::init(&mut store, i, c.n_queries, c.n_variables, c.d_model, &mut rng))
            .collect();
        let aggregator = Aggregator::init(&mut store, c.aggregation, c.n_queries, c.d_model, &mut rng);
        let decoder = Decoder::init(&mut store, c.d_model, c.time_dim, &mut rng);
        init_scalars(&mut store);
        Ok(Self {
            pe: positional_encoding(c.patches(), c.d_model),
            config,
            params: store,
            embed,
            ttcn,
            query_mixer,
            mix,
            aggregator,
            refiner,
            encoder,
            decoder,
        })
    }

    /// Rebuilds a model around stored parameters, checking that every
    /// expected tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (name, fresh) in model.params.iter() {
            match params.get(name) {
                Some(t) if t.shape() == fresh.shape() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        fresh.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn dictionary(&self) -> FrequencyDictionary {
        FrequencyDictionary {
            omega: self.params.get(OMEGA).expect("omega registered").data().to_vec(),
        }
    }

    /// Builds (without evaluating) the forward graph for `input`.
    pub fn build(&self, input: &ModelInput, ablations: &Ablations) -> Result<ForwardPass> {
        ablations.validate()?;
        let store = &self.params;
        let k = self.config.n_freqs;
        let (b, n, l) = (input.batch_size(), input.n_variables(), input.times.shape()[1]);
        if n != self.config.n_variables {
            return Err(Error::DimensionMismatch {
                expected: self.config.n_variables,
                found: n,
            });
        }
        let mut g = Graph::new();
        let times = g.constant(input.times.clone());
        let values = g.constant(input.values.clone());

        let mut freq = None;
        if !ablations.contains(Ablation::NoFreq) {
            let omega = store.leaf(&mut g, OMEGA)?;
            let (re, im) = nudft(&mut g, times, values, &input.mask, omega)?;
            let raw = g.concat(&[re, im], 2)?;
            let refined = if ablations.contains(Ablation::NoRefine) {
                raw
            } else {
                self.refiner.apply(&mut g, store, raw)?
            };
            let re = g.slice(refined, 2, 0, k)?;
            let im = g.slice(refined, 2, k, 2 * k)?;
            let h = self.encoder.apply(&mut g, store, refined)?;
            freq = Some((h, re, im, omega));
        }

        let mut attention = None;
        let mut h_time = None;
        if !ablations.contains(Ablation::NoTime) {
            let patches = encode_patches(&mut g, store, &self.embed, &self.ttcn, &input.patches)?;
            h_time = Some(if ablations.contains(Ablation::NoQueryMix) {
                mean_pool(&mut g, patches, &input.patches.presence)?
            } else {
                let (tokens, attn) = self.query_mixer.apply(&mut g, store, patches, &self.pe)?;
                attention = Some(attn);
                let mixed = dual_mixing(&mut g, store, &self.mix, tokens)?;
                self.aggregator.apply(&mut g, store, mixed)?
            });
        }

        let h_joint = match (h_time, freq) {
            (Some(t), Some((f, ..))) => {
                let lambda = store.leaf(&mut g, LAMBDA_FUSION)?;
                fuse(&mut g, t, f, lambda)?
            }
            (Some(t), None) => t,
            (None, Some((f, ..))) => {
                let lambda = store.leaf(&mut g, LAMBDA_FUSION)?;
                g.mul(f, lambda)?
            }
            (None, None) => unreachable!("rejected by Ablations::validate"),
        };

        let queries = g.constant(input.queries.clone());
        let base = self.decoder.apply(&mut g, store, &self.embed, h_joint, queries)?;
        let (mut seasonal, mut reconstruction, mut spectrum) = (None, None, None);
        let mut bias = None;
        if let Some((_, re, im, omega)) = freq {
            let s = inverse_nudft(&mut g, re, im, queries, omega)?;
            let t = g.reshape(times, &[b, 1, l])?;
            let t = g.broadcast_to(t, &[b, n, l])?;
            reconstruction = Some(inverse_nudft(&mut g, re, im, t, omega)?);
            spectrum = Some((re, im));
            seasonal = Some(s);
            bias = Some((s, store.leaf(&mut g, LAMBDA_SEASONAL)?));
        }
        let prediction = compose_prediction(&mut g, base, bias, &input.mean, &input.std)?;
        Ok(ForwardPass {
            graph: g,
            prediction,
            base,
            seasonal,
            reconstruction,
            spectrum,
            h_time,
            h_freq: freq.map(|f| f.0),
            attention,
        })
    }

    /// Builds and evaluates the forward graph.
    pub fn run(&self, input: &ModelInput, ablations: &Ablations) -> Result<ForwardPass> {
        let mut pass = self.build(input, ablations)?;
        pass.graph.evaluate(&self.params)?;
        Ok(pass)
    }

    /// Predictions `[B, N, Q]` in original units.
    pub fn predict(&self, input: &ModelInput, ablations: &Ablations) -> Result<Tensor> {
        let pass = self.run(input, ablations)?;
        Ok(pass.graph.value(pass.prediction).expect("evaluated").clone())
    }
}
