//! Losses, the Adam optimizer and the training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, AlignedSample};
use crate::error::{Error, Result};
use crate::model::{Ablation, Ablations, ForwardPass, ModelInput, TfMixer};
use crate::nn::ParamStore;
use crate::tensor::{Gradients, Graph, NodeId, Tensor};

/// Mean absolute error between `prediction` and `targets` over positions
/// where `mask` is non-zero. Evaluating with an empty mask fails.
pub fn forecasting_loss(g: &mut Graph, prediction: NodeId, targets: &Tensor, mask: &Tensor) -> Result<NodeId> {
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::EmptyTarget("batch".into()));
    }
    let t = g.constant(targets.clone());
    let diff = g.sub(prediction, t)?;
    let abs = g.abs(diff);
    g.masked_mean(abs, mask.clone())
}

/// Mean absolute error between the reconstruction and the normalized
/// observed values, over observed positions only.
pub fn reconstruction_loss(g: &mut Graph, reconstruction: NodeId, values: &Tensor, mask: &Tensor) -> Result<NodeId> {
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::EmptyHistory("batch".into()));
    }
    let v = g.constant(values.clone());
    let diff = g.sub(reconstruction, v)?;
    let abs = g.abs(diff);
    g.masked_mean(abs, mask.clone())
}

/// Loss nodes attached to a forward graph.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub fore: NodeId,
    pub recon: Option<NodeId>,
    pub total: NodeId,
    /// Effective weight of `recon` in `total`.
    pub gamma: f64,
}

/// Adds the forecasting and reconstruction terms to `pass`. The
/// reconstruction term is still computed under `no_recon` (for reporting)
/// but is left out of `total`.
pub fn attach_losses(pass: &mut ForwardPass, input: &ModelInput, gamma: f64, ablations: &Ablations) -> Result<LossNodes> {
    let g = &mut pass.graph;
    let fore = forecasting_loss(g, pass.prediction, &input.targets, &input.query_mask)?;
    let recon = match pass.reconstruction {
        Some(r) => Some(reconstruction_loss(g, r, &input.values_by_variable, &input.mask_by_variable)?),
        None => None,
    };
    let (total, gamma) = match recon {
        Some(r) if !ablations.contains(Ablation::NoRecon) => {
            let weighted = g.scale(r, gamma);
            (g.add(fore, weighted)?, gamma)
        }
        _ => (fore, 0.0),
    };
    Ok(LossNodes {
        fore,
        recon,
        total,
        gamma,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub fore: f64,
    pub recon: f64,
    pub gamma: f64,
    pub total: f64,
}

impl LossReport {
    pub fn read(g: &Graph, nodes: &LossNodes) -> Self {
        let value = |id: NodeId| g.value(id).map_or(f64::NAN, Tensor::item);
        Self {
            fore: value(nodes.fore),
            recon: nodes.recon.map_or(0.0, value),
            gamma: nodes.gamma,
            total: value(nodes.total),
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_gamma() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    2024
}
fn default_patience() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub ablations: Ablations,
    /// Epochs without validation improvement before stopping; 0 never stops.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            gamma: default_gamma(),
            seed: default_seed(),
            ablations: Ablations::none(),
            patience: default_patience(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be a non-negative number, got {}", self.lr)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("train.gamma must be non-negative, got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        self.ablations.validate()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient; others are untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gr)) in p.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gr;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gr * gr;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_fore: f64,
    pub train_recon: f64,
    pub val_mae: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters the model holds on return.
    pub best_epoch: usize,
    /// Optimizer state at `best_epoch`.
    pub optimizer: Adam,
    pub stopped_early: bool,
}

/// Forward, losses and gradients for one batch.
pub fn batch_gradients(
    model: &TfMixer,
    input: &ModelInput,
    gamma: f64,
    ablations: &Ablations,
) -> Result<(LossReport, Gradients)> {
    let mut pass = model.build(input, ablations)?;
    let nodes = attach_losses(&mut pass, input, gamma, ablations)?;
    pass.graph.evaluate(&model.params)?;
    let report = LossReport::read(&pass.graph, &nodes);
    let grads = pass.graph.backward(nodes.total, &Tensor::scalar(1.0))?;
    Ok((report, grads))
}

fn check_finite(report: &LossReport, grads: &Gradients, epoch: usize, batch: usize) -> Result<()> {
    let term = if !report.fore.is_finite() {
        "forecasting"
    } else if !report.recon.is_finite() {
        "reconstruction"
    } else if !report.total.is_finite() {
        "total"
    } else if grads.iter().any(|(_, g)| !g.is_finite()) {
        "gradient of the total"
    } else {
        return Ok(());
    };
    Err(Error::NumericalAbort { term, epoch, batch })
}

/// Trains `model` in place with Adam on the total loss, one pass over the
/// shuffled training set per epoch. On return the model holds the
/// parameters of the epoch with the lowest validation MAE. `on_epoch` sees
/// each history row as it is produced.
pub fn train(
    model: &mut TfMixer,
    train_set: &[AlignedSample],
    val_set: &[AlignedSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore, Adam)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut fore, mut recon, mut weight) = (0.0, 0.0, 0.0, 0.0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<AlignedSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let input = ModelInput::from_batch(&make_batch(&samples), &model.config)?;
            let (report, grads) = batch_gradients(model, &input, cfg.gamma, &cfg.ablations)?;
            check_finite(&report, &grads, epoch, bi + 1)?;
            adam.update(&mut model.params, &grads);
            let w = chunk.len() as f64;
            total += report.total * w;
            fore += report.fore * w;
            recon += report.recon * w;
            weight += w;
        }
        let val = evaluate(model, val_set, &cfg.ablations, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_total: total / weight,
            train_fore: fore / weight,
            train_recon: recon / weight,
            val_mae: val.mae,
            val_mse: val.mse,
        };
        on_epoch(&record);
        history.push(record);

        if best.as_ref().is_none_or(|b| val.mae < b.0) {
            best = Some((val.mae, epoch, model.params.clone(), adam.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, optimizer) = match best {
        Some((_, epoch, params, opt)) => {
            model.params = params;
            (epoch, opt)
        }
        None => (0, adam),
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        optimizer,
        stopped_early,
    })
}

/// Error metrics over real targets, in original units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Accumulates squared and absolute errors.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricsAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn push(&mut self, prediction: f64, target: f64) {
        let e = prediction - target;
        self.sq += e * e;
        self.abs += e.abs();
        self.count += 1;
    }

    pub fn finish(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
            count: self.count,
        }
    }
}

/// Predictions for `samples`, per sample and variable, in original units.
pub fn predict_samples(
    model: &TfMixer,
    samples: &[AlignedSample],
    ablations: &Ablations,
    batch_size: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk);
        let input = ModelInput::from_batch(&batch, &model.config)?;
        let pred = model.predict(&input, ablations)?;
        let (n, q) = (batch.n_variables, batch.n_queries);
        for (bi, s) in chunk.iter().enumerate() {
            let per_var = (0..n)
                .map(|ni| {
                    let base = (bi * n + ni) * q;
                    pred.data()[base..base + s.queries[ni].len()].to_vec()
                })
                .collect();
            out.push(per_var);
        }
    }
    Ok(out)
}

/// MSE and MAE of the model over every real target in `samples`.
pub fn evaluate(model: &TfMixer, samples: &[AlignedSample], ablations: &Ablations, batch_size: usize) -> Result<Metrics> {
    let preds = predict_samples(model, samples, ablations, batch_size)?;
    let mut acc = MetricsAccumulator::default();
    for (s, p) in samples.iter().zip(&preds) {
        for (targets, preds) in s.targets.iter().zip(p) {
            for (&t, &y) in targets.iter().zip(preds) {
                acc.push(y, t);
            }
        }
    }
    Ok(acc.finish())
}

/// Predicts each variable's mean over the sample's own history (0 when the
/// variable was never observed).
pub fn historical_mean(samples: &[AlignedSample]) -> Metrics {
    let mut acc = MetricsAccumulator::default();
    for s in samples {
        for n in 0..s.n_variables {
            let (sum, count) = (0..s.len())
                .filter(|&l| s.observed(l, n))
                .fold((0.0, 0usize), |(a, c), l| (a + s.value(l, n), c + 1));
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            for &t in &s.targets[n] {
                acc.push(mean, t);
            }
        }
    }
    acc.finish()
}
